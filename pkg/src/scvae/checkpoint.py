"""Model checkpoints: the shared container with magic ``SCVZ`` and float32 tensors."""

from __future__ import annotations

import os

import numpy as np

from . import container
from .autodiff import BatchNormState
from .container import ContainerError
from .models import BN_DECAY, BN_EPSILON, SPEC_BUILDERS, VaeModel, init_model

MAGIC = b"SCVZ"
VERSION = 1


class ArchitectureMismatchError(ContainerError):
    pass


def to_bytes(model: VaeModel) -> bytes:
    tensors = [(k, v.astype(np.float32)) for k, v in model.params.items()]
    tensors += [(k, v.astype(np.float32)) for k, v in model.buffers().items()]
    return container.pack(MAGIC, VERSION, model.arch.describe(), tensors)


def serialized_size(model: VaeModel) -> int:
    return len(to_bytes(model))


def save_checkpoint(model: VaeModel, path) -> int:
    data = to_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def _parse_header(descriptor: str):
    fields = {}
    for line in descriptor.splitlines()[:4]:
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        return fields["arch"], int(fields["tw"]), int(fields["features"]), int(fields["latent"])
    except (KeyError, ValueError) as err:
        raise ArchitectureMismatchError(f"malformed architecture descriptor: {err}") from err


def from_bytes(data: bytes, expected: str | None = None) -> VaeModel:
    descriptor, tensors = container.unpack(data, MAGIC, VERSION)
    name, tw, nf, latent = _parse_header(descriptor)
    if name not in SPEC_BUILDERS:
        raise ArchitectureMismatchError(f"unknown architecture {name!r} in checkpoint")
    if expected is not None and name != expected:
        raise ArchitectureMismatchError(f"checkpoint holds a {name} model, expected {expected}")
    arch = SPEC_BUILDERS[name](tw, nf, latent)
    if arch.describe() != descriptor:
        raise ArchitectureMismatchError("layer listing does not match the named architecture")

    template = init_model(arch, seed=0)
    wanted = {k: v.shape for k, v in template.params.items()}
    wanted.update({k: v.shape for k, v in template.buffers().items()})
    got = {k: v.shape for k, v in tensors.items()}
    if got != wanted:
        missing = sorted(set(wanted) - set(got))
        extra = sorted(set(got) - set(wanted))
        bad = sorted(k for k in set(got) & set(wanted) if got[k] != wanted[k])
        raise ArchitectureMismatchError(
            f"tensor table inconsistent with {name}: missing={missing[:3]} extra={extra[:3]} "
            f"shape mismatch={bad[:3]}"
        )
    params = {k: tensors[k].astype(np.float64) for k in template.params}
    bn = {
        k: BatchNormState(
            tensors[f"{k}.running_mean"].astype(np.float64),
            tensors[f"{k}.running_var"].astype(np.float64),
            BN_DECAY,
            BN_EPSILON,
        )
        for k in template.bn
    }
    return VaeModel(arch, params, bn)


def load_checkpoint(path, expected: str | None = None) -> VaeModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), expected)
