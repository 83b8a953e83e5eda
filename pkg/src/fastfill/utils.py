"""Small shared helpers: seed derivation, parameter fingerprints, atomic writes."""

from __future__ import annotations

import hashlib
import os
from contextlib import contextmanager

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Mix an arbitrary tuple of ints/strings into a stable 63-bit seed."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            digest = hashlib.sha256(p.encode("utf-8")).digest()
            ints.append(int.from_bytes(digest[:8], "little"))
        else:
            ints.append(int(p))
    state = np.random.SeedSequence(ints).generate_state(1, np.uint64)[0]
    return int(state % (1 << 63))


def param_fingerprint(module: torch.nn.Module) -> str:
    """SHA-256 over all named parameters (names + raw bytes). Bitwise-sensitive."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextmanager
def requires_grad_off(module: torch.nn.Module):
    """Temporarily disable grad accumulation into `module`'s parameters.

    Gradients still flow *through* the module to its inputs, which is what the
    generator update needs when backpropagating through a critic.
    """
    saved = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp file + rename so readers never observe partial output."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_torch_save(path: str, payload) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    torch.save(payload, tmp)
    os.replace(tmp, path)
