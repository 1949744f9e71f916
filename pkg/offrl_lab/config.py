"""Base settings class shared by every configuration container in the lab"""
import json
from pathlib import Path
from typing import Any, Dict, Type, TypeVar, Union

import yaml
from pydantic import BaseSettings as _BaseSettings

from offrl_lab.exceptions import ConfigurationError

_T = TypeVar("_T", bound="BaseSettings")

PathLike = Union[str, Path]


class BaseSettings(_BaseSettings):
    """pydantic settings that round-trip through yaml files

    pydantic's `BaseSettings` forbids extra keys, so a typo in a config file fails
    validation instead of being ignored. JSON files load through the same reader.
    """

    class Config:
        # keeps stray shell variables like SEED or ENV out of run configs
        env_prefix = "OFFRL_"
        use_enum_values = False
        validate_assignment = True

    def plain(self) -> Dict[str, Any]:
        """JSON-compatible dict: enums become their values, paths strings"""
        return json.loads(self.json())

    def dump_yaml(self, cfg_path: PathLike) -> None:
        """Write the settings to `cfg_path`, fields in declaration order"""
        with open(cfg_path, mode="w") as fp:
            yaml.safe_dump(self.plain(), fp, indent=4, sort_keys=False)

    @classmethod
    def from_yaml(cls: Type[_T], filename: PathLike) -> _T:
        """Load and validate settings from a yaml (or json) file

        Parameters
        ----------
        filename : PathLike
            path to the file; an empty file gives the defaults

        Returns
        -------
        _T
            the validated settings

        Raises
        ------
        ConfigurationError
            if the file is not valid yaml or its top level is not a mapping
        """
        try:
            raw_data = yaml.safe_load(Path(filename).read_text())
        except yaml.YAMLError as err:
            raise ConfigurationError(f"{filename} is not valid yaml: {err}") from err
        if raw_data is None:
            raw_data = {}
        if not isinstance(raw_data, dict):
            raise ConfigurationError(f"{filename}: expected a mapping of settings, got {type(raw_data).__name__}")
        return cls(**raw_data)
