"""The policy model: one encoder plus the attention decoder, as a named
parameter dict, with init, counting, serialization and decode dispatch."""

from __future__ import annotations

import numpy as np

from . import decoder as dec
from .autodiff import BatchNormState, Tensor
from .encoders import Embeddings, EncoderConfig, encode, init_encoder
from .serialize import load_tensors, save_tensors
from .tsp import Tour, TspInstance

FORMAT = "tournet-policy"


class PolicyModel:
    """Encoder + decoder parameters behind a small convenience surface.

    ``info`` carries provenance (model id, training paradigm, training size)
    for reports; it is advisory and never affects computation.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor],
                 bn_states: dict[str, BatchNormState], info: dict | None = None):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.info = info or {}

    @classmethod
    def init(cls, config: EncoderConfig, seed_or_rng, info: dict | None = None) -> "PolicyModel":
        rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
        params, states = init_encoder(config, rng)
        params.update(dec.init_decoder(config.embed_dim, rng))
        return cls(config, params, states, info)

    def encode(self, coords: np.ndarray, training: bool = False) -> Embeddings:
        return encode(self.config, self.params, self.bn_states, coords, training)

    def encode_instance(self, inst: TspInstance, training: bool = False) -> Embeddings:
        return self.encode(inst.coords[None], training)

    def copy_weights_from(self, other: "PolicyModel") -> None:
        for name, p in self.params.items():
            p.data[...] = other.params[name].data
        for name, s in self.bn_states.items():
            s.mean[...] = other.bn_states[name].mean
            s.var[...] = other.bn_states[name].var

    def clone(self) -> "PolicyModel":
        twin = PolicyModel.init(self.config, 0, dict(self.info))
        twin.copy_weights_from(self)
        return twin

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{k}": p.data for k, p in self.params.items()}
        for k, s in self.bn_states.items():
            arrays[f"buffer/{k}.mean"] = s.mean
            arrays[f"buffer/{k}.var"] = s.var
        return arrays

    def header(self) -> dict:
        return {"format": FORMAT, "encoder": self.config.to_dict(), "info": self.info}

    def save(self, path) -> None:
        save_tensors(path, self.state_arrays(), self.header())

    @classmethod
    def load(cls, path) -> "PolicyModel":
        arrays, header = load_tensors(path)
        return cls.from_arrays(arrays, header)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], header: dict) -> "PolicyModel":
        if header.get("format") != FORMAT:
            raise ValueError(f"not a policy checkpoint (format {header.get('format')!r})")
        config = EncoderConfig.from_dict(header["encoder"])
        model = cls.init(config, 0, header.get("info", {}))
        for name, p in model.params.items():
            p.data[...] = arrays[f"param/{name}"]
        for name, s in model.bn_states.items():
            s.mean[...] = arrays[f"buffer/{name}.mean"]
            s.var[...] = arrays[f"buffer/{name}.var"]
        return model

    # -- decoding ---------------------------------------------------------

    def solve_batch(self, instances: list[TspInstance], decode: dec.DecodeConfig) -> list[Tour]:
        """Decode every instance under one search setting."""
        if decode.mode == "greedy":
            return dec.greedy_decode(self, instances, clip=decode.clip)
        if decode.mode == "sample":
            rng = np.random.default_rng(decode.seed)
            streams = rng.spawn(len(instances))
            return [dec.sample_decode(self, inst, decode.k, streams[i], clip=decode.clip).best
                    for i, inst in enumerate(instances)]
        return [dec.beam_search(self, inst, decode.width, clip=decode.clip).shortest
                for inst in instances]


def parameter_count(config: EncoderConfig) -> int:
    """Trainable scalars in encoder plus decoder at the given config."""
    model = PolicyModel.init(config, 0)
    return sum(p.data.size for p in model.params.values())
