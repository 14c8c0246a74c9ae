"""Training checkpoints: model, hypernetworks, optimizer moments, RNG and log in one file.

Resuming from a checkpoint continues the exact same computation, so the
training log of an interrupted-and-resumed run equals that of an
uninterrupted one (apart from wall-clock fields).
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from stepedit import toylm
from stepedit.errors import CheckpointError
from stepedit.hypernet import HypernetworkStepSet
from stepedit.metatrain import Trainer, TrainerConfig
from stepedit.store import load_arrays, save_arrays

KIND = "stepedit.trainer_state"
VERSION = 1


def samples_digest(samples) -> str:
    blob = json.dumps([s.to_json() for s in samples], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_state(path, trainer: Trainer):
    state = trainer.state_dict()
    opt = state["optimizer"]
    arrays = {}
    for k, v in trainer.w0.items():
        arrays[f"model.{k}"] = v
    for k, v in trainer.hypernets.flat_params().items():
        arrays[f"hyper.{k}"] = v
    for k, v in opt["m"].items():
        arrays[f"adam_m.{k}"] = v
    for k, v in opt["v"].items():
        arrays[f"adam_v.{k}"] = v
    header = {
        "kind": KIND,
        "version": VERSION,
        "trainer_config": trainer.config.to_json(),
        "model_config": toylm._config_to_json(trainer.model_config),
        "hypernets": trainer.hypernets.header(),
        "samples": samples_digest(trainer.samples),
        "optimizer": {"t": opt["t"], "n_updates": opt["n_updates"], "n_skipped": opt["n_skipped"]},
        "trainer": {k: state[k] for k in ("iteration", "queue", "rng", "n_captures", "n_updates",
                                          "log", "skipped")},
    }
    return save_arrays(path, header, arrays)


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_state(path, train_samples) -> Trainer:
    """Rebuild a :class:`Trainer` exactly as it was when saved.

    ``train_samples`` must be the same pool the trainer was built with.
    """
    header, arrays = load_arrays(path, KIND, VERSION)
    try:
        if header["samples"] != samples_digest(train_samples):
            raise CheckpointError(f"{path}: training samples differ from the ones checkpointed")
        model = toylm.ToyModel(toylm._config_from_json(header["model_config"]), _strip(arrays, "model."))
        hyper_arrays = _strip(arrays, "hyper.")
        hypernets = HypernetworkStepSet.from_arrays(header["hypernets"], hyper_arrays)
        trainer = Trainer(TrainerConfig(**header["trainer_config"]), model, train_samples, hypernets)
        opt = dict(header["optimizer"])
        opt["m"] = _strip(arrays, "adam_m.")
        opt["v"] = _strip(arrays, "adam_v.")
        state = dict(header["trainer"])
        state["optimizer"] = opt
        trainer.load_state_dict(state)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint contents: {exc}") from exc
    return trainer


def state_fingerprint(trainer: Trainer) -> str:
    """Digest of every array a checkpoint holds; equal digests mean equal state."""
    h = hashlib.sha256()
    for k, v in sorted(trainer.hypernets.flat_params().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    st = trainer.optimizer.state_dict()
    for name in ("m", "v"):
        for k in sorted(st[name]):
            h.update(np.ascontiguousarray(st[name][k]).tobytes())
    return h.hexdigest()[:16]
