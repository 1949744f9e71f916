#!/usr/bin/env python
"""Packaging shim, the metadata lives in setup.cfg"""
from pathlib import Path

from setuptools import setup
from setuptools.config import read_configuration

metadata = read_configuration(Path(__file__).parent / "setup.cfg")["metadata"]

setup(download_url=f"{metadata['url']}/archive/refs/tags/v{metadata['version']}.tar.gz")
