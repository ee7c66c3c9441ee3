# Copyright © 2024 MoPD Lab Contributors.

import mopd

# -- Project information -----------------------------------------------------

project = "MoPD"
copyright = "2024, MoPD Lab Contributors"
author = "MoPD Lab Contributors"
version = ".".join(mopd.__version__.split(".")[:3])
release = version

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.intersphinx",
    "sphinx.ext.napoleon",
    "sphinx.ext.mathjax",
]

python_use_unqualified_type_names = True
autosummary_generate = True

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "scipy": ("https://docs.scipy.org/doc/scipy/", None),
}

templates_path = ["_templates"]
source_suffix = ".rst"
main_doc = "index"
highlight_language = "python"
add_module_names = False

# -- Options for HTML output -------------------------------------------------

html_theme = "sphinx_book_theme"

html_theme_options = {
    "show_toc_level": 2,
    "navigation_with_keys": False,
}

