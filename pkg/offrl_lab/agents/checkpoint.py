"""Self-describing JSON container for agent checkpoints

Layout (all numbers are JSON floats, which round-trip exactly)::

    {
      "format": "offrl_lab.checkpoint", "version": 1,
      "algorithm": "td3bc", "env_kind": "pointmass2d", "step": 5000, "log_eta": 0.0,
      "networks":   {"actor": NET, "actor_target": NET, "critic1": NET, ...},
      "optimizers": {"actor": OPT, "critic1": OPT, "critic2": OPT},
      "normalizer": {"mean": [...], "std": [...]} | null,
      "behavior":   {"network": NET, "action_dim": 2, ...} | null
    }

    NET = {"spec": {...}, "weights": [[[...]]], "biases": [[...]]}
    OPT = {"step", "lr", "beta1", "beta2", "eps", "first_moment": GRADS, "second_moment": GRADS}
"""
import json
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from offrl_lab.agents.config import Algorithm
from offrl_lab.agents.state import AgentState
from offrl_lab.config import PathLike
from offrl_lab.datasets import Normalizer
from offrl_lab.diffnet import MlpParams, MlpSpec, OptimState, ParamGrads
from offrl_lab.divergences import BehaviorModel
from offrl_lab.envs import ENV_SPECS, EnvKind
from offrl_lab.exceptions import CheckpointFormatError

FORMAT = "offrl_lab.checkpoint"
VERSION = 1

_NETWORKS = ("actor", "actor_target", "critic1", "critic2", "critic1_target", "critic2_target")
_OPTIMIZERS = {"actor": "actor_opt", "critic1": "critic1_opt", "critic2": "critic2_opt"}


def _net_to_dict(params: MlpParams) -> Dict[str, Any]:
    return {
        "spec": params.spec.to_dict(),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def _net_from_dict(raw: Dict[str, Any]) -> MlpParams:
    return MlpParams(
        spec=MlpSpec.from_dict(raw["spec"]),
        weights=[np.array(w, dtype=np.float64) for w in raw["weights"]],
        biases=[np.array(b, dtype=np.float64) for b in raw["biases"]],
    )


def _grads_to_dict(grads: ParamGrads) -> Dict[str, Any]:
    return {"weights": [w.tolist() for w in grads.weights], "biases": [b.tolist() for b in grads.biases]}


def _grads_from_dict(raw: Dict[str, Any]) -> ParamGrads:
    return ParamGrads(
        weights=[np.array(w, dtype=np.float64) for w in raw["weights"]],
        biases=[np.array(b, dtype=np.float64) for b in raw["biases"]],
    )


def _opt_to_dict(opt: OptimState) -> Dict[str, Any]:
    return {
        "step": opt.step,
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "first_moment": _grads_to_dict(opt.first_moment),
        "second_moment": _grads_to_dict(opt.second_moment),
    }


def _opt_from_dict(raw: Dict[str, Any]) -> OptimState:
    return OptimState(
        first_moment=_grads_from_dict(raw["first_moment"]),
        second_moment=_grads_from_dict(raw["second_moment"]),
        step=raw["step"],
        lr=raw["lr"],
        beta1=raw["beta1"],
        beta2=raw["beta2"],
        eps=raw["eps"],
    )


def state_to_dict(state: AgentState) -> Dict[str, Any]:
    """Plain-data image of an agent state"""
    behavior: Optional[Dict[str, Any]] = None
    if state.behavior is not None:
        behavior = {
            "network": _net_to_dict(state.behavior.params),
            "action_dim": state.behavior.action_dim,
            "action_low": state.behavior.action_low,
            "action_high": state.behavior.action_high,
            "normalizer": None if state.behavior.normalizer is None else state.behavior.normalizer.dict(),
        }
    return {
        "format": FORMAT,
        "version": VERSION,
        "algorithm": state.algorithm.value,
        "env_kind": state.env_spec.kind.value,
        "step": state.step,
        "log_eta": state.log_eta,
        "networks": {
            name: _net_to_dict(getattr(state, name)) for name in _NETWORKS if getattr(state, name) is not None
        },
        "optimizers": {
            name: _opt_to_dict(getattr(state, field))
            for name, field in _OPTIMIZERS.items()
            if getattr(state, field) is not None
        },
        "normalizer": None if state.normalizer is None else state.normalizer.dict(),
        "behavior": behavior,
    }


def state_from_dict(raw: Dict[str, Any]) -> AgentState:
    """Rebuild an agent state from `state_to_dict` output

    Raises
    ------
    CheckpointFormatError
        if the container is not a checkpoint of a known version
    """
    if raw.get("format") != FORMAT or raw.get("version") != VERSION:
        raise CheckpointFormatError(f"not a version {VERSION} {FORMAT} container")
    try:
        return _state_from_container(raw)
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointFormatError(f"broken checkpoint container ({err!r})") from err


def _state_from_container(raw: Dict[str, Any]) -> AgentState:
    networks = {name: _net_from_dict(net) for name, net in raw["networks"].items()}
    optimizers = {_OPTIMIZERS[name]: _opt_from_dict(opt) for name, opt in raw["optimizers"].items()}
    behavior = None
    if raw.get("behavior") is not None:
        b = raw["behavior"]
        behavior = BehaviorModel(
            params=_net_from_dict(b["network"]),
            action_dim=b["action_dim"],
            action_low=b["action_low"],
            action_high=b["action_high"],
            normalizer=None if b["normalizer"] is None else Normalizer(**b["normalizer"]),
        )
    return AgentState(
        algorithm=Algorithm(raw["algorithm"]),
        env_spec=ENV_SPECS[EnvKind(raw["env_kind"])],
        normalizer=None if raw["normalizer"] is None else Normalizer(**raw["normalizer"]),
        behavior=behavior,
        log_eta=raw["log_eta"],
        step=raw["step"],
        **networks,
        **optimizers,
    )


def save_checkpoint(state: AgentState, path: PathLike) -> Path:
    """Write a checkpoint file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        json.dump(state_to_dict(state), fp)
    return path


def load_checkpoint(path: PathLike) -> AgentState:
    """Read a checkpoint file written by `save_checkpoint`"""
    with open(path) as fp:
        return state_from_dict(json.load(fp))
