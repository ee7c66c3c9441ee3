# Copyright © 2024 MoPD Lab Contributors.

"""Helpers for the nested ``dict``/``list`` trees that hold parameters,
gradients and optimizer state.

A tree is any nesting of ``dict``, ``list`` and ``tuple``; everything else is
a leaf. Leaf paths are written in dot notation, so the soft prompt of a
learner lives at ``"student.soft_prompt.vectors"``.
"""

from typing import Any, Callable, Iterator, List, Optional, Tuple

_CONTAINERS = (dict, list, tuple)


def _is_container(value: Any, is_leaf: Optional[Callable]) -> bool:
    if is_leaf is not None and is_leaf(value):
        return False
    return isinstance(value, _CONTAINERS)


def _walk(
    tree: Any, path: Tuple[str, ...], is_leaf: Optional[Callable]
) -> Iterator[Tuple[Tuple[str, ...], Any]]:
    if not _is_container(tree, is_leaf):
        yield path, tree
        return
    items = tree.items() if isinstance(tree, dict) else enumerate(tree)
    for key, child in items:
        yield from _walk(child, path + (str(key),), is_leaf)


def tree_map(
    fn: Callable, tree: Any, *rest: Any, is_leaf: Optional[Callable] = None
) -> Any:
    """Build a tree of the same shape as ``tree`` with ``fn`` applied to every
    leaf.

    Each tree in ``rest`` must contain at least the paths of ``tree``; its
    matching leaves are passed to ``fn`` as extra arguments, which is how the
    optimizers pair a gradient with its parameter and state:

    .. code-block:: python

        from mopd.utils import tree_map

        grads = {"student": {"soft_prompt": {"vectors": g_ce}}}
        scaled = tree_map(lambda g: 0.8 * g, grads)

    Args:
        fn (callable): Called on each leaf of ``tree``.
        tree (Any): The tree that fixes the output structure.
        rest (tuple[Any]): Trees read alongside ``tree``.
        is_leaf (callable, optional): Marks extra values as leaves.

    Returns:
        The mapped tree. Lists and tuples keep their type.
    """
    if not _is_container(tree, is_leaf):
        return fn(tree, *rest)
    if isinstance(tree, dict):
        return {
            key: tree_map(fn, child, *(r[key] for r in rest), is_leaf=is_leaf)
            for key, child in tree.items()
        }
    mapped = [
        tree_map(fn, child, *(r[i] for r in rest), is_leaf=is_leaf)
        for i, child in enumerate(tree)
    ]
    return type(tree)(mapped)


def tree_flatten(
    tree: Any, prefix: str = "", is_leaf: Optional[Callable] = None
) -> List[Tuple[str, Any]]:
    """List the ``(path, leaf)`` pairs of ``tree`` in traversal order.

    .. code-block:: python

        from mopd.utils import tree_flatten

        tree_flatten({"gate": {"weight": w}})
        # [("gate.weight", w)]

        tree_flatten([[0]], prefix="pool")
        # [("pool.0.0", 0)]

    Empty containers contribute nothing.

    Args:
        tree (Any): The tree to flatten.
        prefix (str): Prepended to every path.
        is_leaf (callable, optional): Marks extra values as leaves.
    """
    head = (prefix,) if prefix else ()
    return [(".".join(path), leaf) for path, leaf in _walk(tree, head, is_leaf)]


class _Branch(dict):
    pass


def _rebuild(node: Any) -> Any:
    if not isinstance(node, _Branch):
        return node
    children = {key: _rebuild(child) for key, child in node.items()}
    if not all(key.isdigit() for key in children):
        return children
    # Missing list slots hold an empty tree.
    out = [{} for _ in range(1 + max(int(key) for key in children))]
    for key, child in children.items():
        out[int(key)] = child
    return out


def tree_unflatten(flat: List[Tuple[str, Any]]) -> Any:
    """Inverse of :func:`tree_flatten`.

    Branches whose keys are all integers come back as lists.

    .. code-block:: python

        from mopd.utils import tree_unflatten

        tree_unflatten([("gate.weight", w)])
        # {"gate": {"weight": w}}
    """
    if len(flat) == 1 and flat[0][0] == "":
        return flat[0][1]
    root = _Branch()
    for path, leaf in flat:
        *parents, name = path.split(".")
        node = root
        for part in parents:
            node = node.setdefault(part, _Branch())
        node[name] = leaf
    return _rebuild(root)


def tree_reduce(
    fn: Callable, tree: Any, initializer: Any = None, is_leaf: Optional[Callable] = None
) -> Any:
    """Fold ``fn(accumulator, leaf)`` over the leaves of ``tree``.

    Without ``initializer`` the first leaf seeds the accumulator.

    Example:
        >>> from mopd.utils import tree_reduce
        >>> tree_reduce(lambda acc, x: acc + x, {"a": [1, 2, 3], "b": [4, 5]}, 0)
        15
    """
    leaves = (leaf for _, leaf in _walk(tree, (), is_leaf))
    accumulator = initializer if initializer is not None else next(leaves, None)
    for leaf in leaves:
        accumulator = fn(accumulator, leaf)
    return accumulator

