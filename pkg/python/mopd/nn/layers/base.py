# Copyright © 2024 MoPD Lab Contributors.

from __future__ import annotations

import textwrap
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from mopd.utils import tree_flatten, tree_unflatten

_STORED = (np.ndarray, dict, list, tuple)


def _holds_module(value: Any) -> bool:
    if isinstance(value, Module):
        return True
    if isinstance(value, dict):
        return any(_holds_module(v) for v in value.values())
    if isinstance(value, (list, tuple)):
        return any(_holds_module(v) for v in value)
    return False


class Module(dict):
    """A container of arrays and sub-modules that the trainer can walk.

    Arrays, and lists or dicts of them, assigned as attributes are stored as
    dictionary entries; everything else (floats, backbones, flags) is kept as
    a plain attribute and never shows up in :meth:`parameters`. Names starting
    with an underscore are private.

    :meth:`freeze` marks entries as constant. The losses in
    :mod:`mopd.nn.losses` differentiate only :meth:`trainable_parameters` and
    the optimizers write their step back with :meth:`update`.

    .. code-block:: python

        import numpy as np
        from mopd.nn import Module

        class Scale(Module):
            def __init__(self, dims: int):
                super().__init__()
                self.weight = np.ones((dims,))

            def __call__(self, x):
                return self.weight * x

        layer = Scale(4)
        layer.update({"weight": 2 * layer.weight})
    """

    __call__: Callable

    def __init__(self):
        self._frozen = set()

    # Attribute access -------------------------------------------------------

    def __getattr__(self, key: str):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(
                f"{type(self).__name__!r} object has no attribute {key!r}"
            ) from None

    def __setattr__(self, key: str, value: Any):
        if isinstance(value, _STORED):
            if key in self.__dict__:
                del self.__dict__[key]
            self[key] = value
        else:
            self.pop(key, None)
            object.__setattr__(self, key, value)

    def __delattr__(self, key: str):
        if key in self:
            del self[key]
        else:
            object.__delattr__(self, key)

    def _extra_repr(self) -> str:
        return ""

    def __repr__(self):
        lines = [f"{type(self).__name__}({self._extra_repr()}"]
        for name, child in self.children().items():
            lines.append(textwrap.indent(f"({name}): {child!r}", "  "))
        return "\n".join(lines) + ("\n)" if len(lines) > 1 else ")")

    # Traversal --------------------------------------------------------------

    def _is_parameter(self, key: str, value: Any) -> bool:
        return isinstance(value, _STORED) and not key.startswith("_")

    def _is_trainable(self, key: str, value: Any) -> bool:
        return self._is_parameter(key, value) and key not in self._frozen

    def _gather(self, trainable: bool) -> dict:
        keep = self._is_trainable if trainable else self._is_parameter
        return {
            key: _gather_value(value, trainable)
            for key, value in self.items()
            if keep(key, value)
        }

    def parameters(self) -> dict:
        """Every array of this module and its sub-modules as a nested tree."""
        return self._gather(trainable=False)

    def trainable_parameters(self) -> dict:
        """Like :meth:`parameters` but without frozen entries."""
        return self._gather(trainable=True)

    def weights(self) -> Dict[str, np.ndarray]:
        """The trainable parameters keyed by their dotted path."""
        return dict(tree_flatten(self.trainable_parameters()))

    def children(self) -> Dict[str, Module]:
        """The direct sub-modules, keyed by dotted path.

        Sub-modules held in lists or dicts get the container index in their
        name, e.g. ``"layers.0"``.
        """
        found = {}
        for key, value in self.items():
            if key.startswith("_") or not _holds_module(value):
                continue
            found.update(
                tree_flatten(value, prefix=key, is_leaf=lambda v: isinstance(v, Module))
            )
        return {name: m for name, m in found.items() if isinstance(m, Module)}

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, Module]]:
        """Yield ``(path, module)`` for this module and every descendant,
        parents before children."""
        yield prefix, self
        for name, child in self.children().items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> List[Module]:
        """This module and every descendant."""
        return [m for _, m in self.named_modules()]

    # Writing ----------------------------------------------------------------

    def update(self, parameters: dict, strict: bool = True) -> Module:
        """Overwrite arrays at the locations given by a (partial) tree.

        This is how the optimizer commits a step. Frozen arrays can be
        overwritten as well; freezing only removes them from gradients.

        Args:
            parameters (dict): A tree shaped like :meth:`parameters`. Only the
              locations it contains are replaced.
            strict (bool): If ``True`` unknown names or non-array values for
              array locations raise ``ValueError``. Default: ``True``.

        Returns:
            The module itself.
        """
        _assign(self, parameters, strict)
        return self

    def load_weights(
        self,
        weights: Union[Dict[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]],
        strict: bool = True,
    ) -> Module:
        """Set trainable arrays from dotted-path weights, e.g. a checkpoint.

        Values are converted to ``float64``.

        Args:
            weights: A ``{path: array}`` mapping or ``(path, array)`` pairs.
            strict (bool, optional): If ``True`` the names and shapes must
              match :meth:`weights` exactly. Default: ``True``.

        Returns:
            The module itself.
        """
        pairs = weights.items() if isinstance(weights, dict) else weights
        incoming = {k: np.asarray(v, dtype=np.float64) for k, v in pairs}

        if strict:
            current = self.weights()
            unknown = sorted(incoming.keys() - current.keys())
            if unknown:
                raise ValueError(
                    "Received parameters not in module: " + ", ".join(unknown) + "."
                )
            absent = sorted(current.keys() - incoming.keys())
            if absent:
                raise ValueError("Missing parameters: " + ", ".join(absent) + ".")
            for name, array in current.items():
                if incoming[name].shape != array.shape:
                    raise ValueError(
                        f"Expected shape {array.shape} for parameter {name} "
                        f"but received shape {incoming[name].shape}."
                    )

        if incoming:
            self.update(tree_unflatten(list(incoming.items())), strict=False)
        return self

    # Freezing ---------------------------------------------------------------

    def _select_keys(self, keys: Union[str, List[str]], strict: bool) -> List[str]:
        keys = [keys] if isinstance(keys, str) else list(keys)
        if strict:
            for key in keys:
                if key not in self:
                    raise KeyError(f"Module doesn't contain member {key}.")
        return keys

    def _own_arrays(self) -> List[str]:
        return [
            key
            for key, value in self.items()
            if self._is_parameter(key, value) and not _holds_module(value)
        ]

    def freeze(
        self,
        *,
        recurse: bool = True,
        keys: Optional[Union[str, List[str]]] = None,
        strict: bool = False,
    ) -> Module:
        """Exclude arrays from :meth:`trainable_parameters`. Idempotent.

        Args:
            recurse (bool, optional): Apply to every sub-module as well.
              Default: ``True``.
            keys (str or list[str], optional): Only freeze these entries of
              each module. By default every array entry is frozen.
            strict (bool, optional): Raise ``KeyError`` for keys a module
              does not hold. Default: ``False``.

        Returns:
            The module itself.
        """
        targets = self.modules() if recurse else [self]
        for module in targets:
            names = module._own_arrays() if keys is None else keys
            module._frozen.update(module._select_keys(names, strict))
        return self


def _gather_value(value: Any, trainable: bool) -> Any:
    if isinstance(value, Module):
        return value._gather(trainable)
    if isinstance(value, dict):
        return {k: _gather_value(v, trainable) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [
            _gather_value(v, trainable) if isinstance(v, _STORED) else {}
            for v in value
        ]
    return value


def _assign(target: Any, source: Any, strict: bool) -> None:
    if isinstance(source, dict):
        entries = source.items()
    elif isinstance(source, list):
        entries = enumerate(source)
    else:
        if strict:
            raise ValueError(f"Received invalid type: {type(source).__name__}.")
        return

    for key, new in entries:
        if isinstance(target, dict) and key not in target:
            if strict:
                raise ValueError(f'Module does not have parameter named "{key}".')
            continue
        old = target[key]
        if isinstance(old, np.ndarray):
            if strict and not isinstance(new, np.ndarray):
                raise ValueError(f"Received invalid type: {type(new).__name__}.")
            target[key] = new
        else:
            _assign(old, new, strict)
