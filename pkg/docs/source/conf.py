# Configuration file for the Sphinx documentation builder.
#
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import datetime
import os
import sys

sys.path.insert(0, os.path.abspath("../.."))
import offrl_lab  # noqa: E402

# -- Project information -----------------------------------------------------

project = "offrl_lab"
author = "offrl_lab developers"
now = datetime.datetime.now()
copyright = f"2024-{now.year}, {author}"

# The full version, including alpha/beta/rc tags
release = offrl_lab.__version__


# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.autosummary",
    "sphinx.ext.mathjax",
    "sphinxcontrib.autodoc_pydantic",
]

# Autosummary settings
autosummary_generate = True

# Autodoc settings
autodoc_default_options = {
    "members": True,
}
autodoc_pydantic_model_show_json = False
autodoc_pydantic_settings_show_json = False

# Napoleon settings (the package uses numpy-style docstrings)
napoleon_google_docstring = False
napoleon_numpy_docstring = True
napoleon_include_init_with_doc = True
napoleon_include_private_with_doc = False
napoleon_include_special_with_doc = True
napoleon_use_param = False
napoleon_use_rtype = False
napoleon_attr_annotations = True

templates_path = ["_templates"]
exclude_patterns = ["pages/_autosummary/*.tmp"]


# -- Options for HTML output -------------------------------------------------

html_theme = "sphinx_rtd_theme"
html_static_path = ["_static"]
