# TCD Forecast - Utility Functions
# ==============================================================================
# Seed plumbing and tensor/array conversion shared by every engine.
# RNG state is always passed explicitly; nothing here touches global RNGs.
# ==============================================================================
import numpy as np
import torch

from .errors import ParameterError

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


# --- SEEDS ---

def derive_seed(*parts) -> int:
    """Deterministically mixes integers/strings into a 63-bit seed."""
    words = []
    for part in parts:
        if isinstance(part, str):
            words.extend(part.encode("utf-8"))
        else:
            words.append(int(part) & 0xFFFFFFFF)
            words.append((int(part) >> 32) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF


def make_generator(seed) -> torch.Generator:
    """Accepts an int seed or an existing torch.Generator (returned as is)."""
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed))


# --- DTYPES & CONVERSION ---

def torch_dtype(precision: str) -> torch.dtype:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ParameterError(f"Unknown precision '{precision}' (expected one of {sorted(_DTYPES)})")


def as_tensor(values, dtype=torch.float64) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def as_array(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy().astype(np.float64)
    return np.asarray(values, dtype=np.float64)
