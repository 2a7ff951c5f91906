"""The single shared parameter store both decoding modes read."""
from __future__ import annotations

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor, default_dtype


class ParamStore:
    """Named map of leaf tensors; the one mutable object in training.

    Parameters are created once at model build time and updated in place
    by the optimizer. Both mode passes of the model read the same store.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name, shape, init):
        """Register a parameter. ``init`` is an array or a rng->array fn."""
        if name in self._params:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        data = np.asarray(init, dtype=default_dtype())
        if tuple(data.shape) != tuple(shape):
            raise CheckpointError(f"init shape {data.shape} != declared {tuple(shape)} for {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_arrays(self):
        """name -> values, for checkpointing."""
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays, prefix=None, strict=True):
        """Overwrite parameter values in place from ``arrays``.

        With ``prefix``, only parameters whose name starts with it are
        loaded; ``strict`` requires every such parameter to be present.
        Returns the list of loaded names.
        """
        loaded = []
        for name, p in self._params.items():
            if prefix is not None and not name.startswith(prefix):
                continue
            if name not in arrays:
                if strict:
                    raise CheckpointError(f"checkpoint is missing parameter {name!r}")
                continue
            src = np.asarray(arrays[name], dtype=p.data.dtype)
            if src.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {src.shape} vs model {p.data.shape}")
            p.data[...] = src
            loaded.append(name)
        return loaded


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
