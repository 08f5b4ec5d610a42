"""JSON checkpoints for trained decoder/encoder pairs.

Layout (``version`` 1)::

    {
      "version": 1,
      "dims": {"d": .., "h": .., "p": ..},
      "output_kind": "gaussian" | "bernoulli",
      "xi": float,
      "decoder": {"W": [[..]], "a": [..], "V": .., "b": .., "alpha": .., "beta": ..},
      "encoder": {"W": .., "a": .., "W_mean": .., "b_mean": .., "W_logdiag": ..,
                  "b_logdiag": .., "W_u": .., "b_u": ..},
      "meta": {"seed": int, "steps": int, "config_digest": str},
      "digest": sha256 hex of the canonical JSON of every other key
    }

Floats are written with Python's shortest round-trip repr, so loading gives
back bit-identical float64 values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DecoderParams, EncoderParams

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is corrupt, has a bad digest, or holds inconsistent shapes."""


@dataclass
class Checkpoint:
    decoder: DecoderParams
    encoder: EncoderParams
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.decoder.dims


def canonical_digest(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def _to_lists(arrays: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64).tolist() for k, v in arrays.items()}


def checkpoint_payload(ckpt: Checkpoint) -> dict:
    d, h, p = ckpt.decoder.dims
    payload = {
        "version": FORMAT_VERSION,
        "dims": {"d": d, "h": h, "p": p},
        "output_kind": ckpt.decoder.output_kind,
        "xi": float(ckpt.decoder.xi),
        "decoder": _to_lists(ckpt.decoder.arrays()),
        "encoder": _to_lists(ckpt.encoder.arrays()),
        "meta": {
            "seed": ckpt.meta.get("seed"),
            "steps": ckpt.meta.get("steps", 0),
            "config_digest": ckpt.meta.get("config_digest", ""),
        },
    }
    return payload


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    payload = checkpoint_payload(ckpt)
    payload["digest"] = canonical_digest(payload)
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "digest" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing digest")
    digest = payload.pop("digest")
    if canonical_digest(payload) != digest:
        raise CheckpointError(f"digest mismatch in {path}")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    try:
        dec = {k: np.asarray(v, dtype=np.float64) for k, v in payload["decoder"].items()}
        enc = {k: np.asarray(v, dtype=np.float64) for k, v in payload["encoder"].items()}
        decoder = DecoderParams(**dec, output_kind=payload["output_kind"], xi=payload["xi"])
        encoder = EncoderParams(**enc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint {path}: {exc}") from exc
    dims = payload["dims"]
    if decoder.dims != (dims["d"], dims["h"], dims["p"]):
        raise CheckpointError(f"shape mismatch: header says {dims}, arrays say {decoder.dims}")
    if encoder.dims[0] != dims["d"] or encoder.dims[2] != dims["p"]:
        raise CheckpointError("encoder dimensions disagree with the decoder")
    return Checkpoint(decoder, encoder, dict(payload["meta"]))
