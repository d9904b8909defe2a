"""Server side of a communication round.

The server maps each client's low-bitwidth indices back to floats
through that client's codebooks (an exact lookup, no learned
transform), forms the data-size-weighted FedAvg mean, and re-quantizes
the aggregate per client with a tanh codebook at the client's own
bitwidth. The full-precision aggregate is retained between rounds for
metrics; only clients are bitwidth-constrained.

Aggregation weights are computed as exact rationals |D_k|/|D| before
conversion to float, and summation runs in ascending client-id order,
so results do not depend on the order in which clients report.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import quantkit as qk
from .errors import EmptyInput, InvalidParams, MissingClient, ShapeMismatch


def dequantize_client_models(models: list[list[qk.QuantizedTensor]]) -> list[list[np.ndarray]]:
    """Codebook lookup per layer per client; checks layer shapes agree."""
    if not models:
        raise EmptyInput("no client models")
    shapes = [layer.shape for layer in models[0]]
    out = []
    for model in models:
        if [layer.shape for layer in model] != shapes:
            raise ShapeMismatch("client models have inconsistent layer shapes")
        out.append([qk.dequantize(layer) for layer in model])
    return out


def aggregate(models: list[list[np.ndarray]], sample_counts: list[int]) -> list[np.ndarray]:
    """Per-layer weighted mean with weights |D_k| / |D|.

    Weights are exact fractions summing to one; the float conversion
    happens per term at accumulation time.
    """
    if not models:
        raise EmptyInput("no models to aggregate")
    if len(models) != len(sample_counts):
        raise InvalidParams("one sample count per model required")
    if any(c <= 0 for c in sample_counts):
        raise InvalidParams("sample counts must be positive")
    total = sum(sample_counts)
    weights = [Fraction(int(c), int(total)) for c in sample_counts]
    assert sum(weights) == 1
    shapes = [layer.shape for layer in models[0]]
    agg = [np.zeros(s) for s in shapes]
    for model, w in zip(models, weights):
        if [layer.shape for layer in model] != shapes:
            raise ShapeMismatch("model layer shapes disagree")
        fw = float(w)
        for out, layer in zip(agg, model):
            out += fw * layer
    return agg


def requantize_for_client(
    global_model: list[np.ndarray],
    bits: int,
    rng: np.random.Generator,
) -> tuple[list[qk.QuantizedTensor], float]:
    """Quantize the aggregate at a client's bitwidth (fresh tanh codebooks).

    Returns the quantized model and the re-quantization error energy
    ||eps_r||^2 summed over layers.
    """
    if bits < 1:
        raise InvalidParams("bitwidth must be >= 1")
    out = []
    eps_r_sq = 0.0
    for layer in global_model:
        cb = qk.build_tanh_codebook(layer, bits)
        q = qk.stochastic_quantize(layer, cb, rng)
        err = qk.dequantize(q) - layer
        eps_r_sq += float(np.sum(err * err))
        out.append(q)
    return out, eps_r_sq


@dataclass
class ServerState:
    """Aggregation state across rounds.

    ``requant_error_log`` holds one {client_id: ||eps_r||^2} dict per
    completed round. Per-client re-quantization draws come from streams
    derived from (seed, round, client), so rounds are reproducible no
    matter how the surrounding harness schedules work.
    """

    client_bitwidths: dict[int, int]
    seed: int = 0
    global_model: list[np.ndarray] | None = None
    round_counter: int = 0
    requant_error_log: list[dict[int, float]] = field(default_factory=list)

    def _round_rng(self, client_id: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.round_counter, client_id))
        )

    def run_round(
        self,
        client_models: dict[int, list[qk.QuantizedTensor]],
        sample_counts: dict[int, int],
    ) -> dict[int, list[qk.QuantizedTensor]]:
        """Dequantize, aggregate, and re-quantize for every client.

        Full participation is assumed: every registered client must
        report, otherwise MissingClient is raised. The aggregate is kept
        in ``global_model`` at full precision.
        """
        expected = sorted(self.client_bitwidths)
        got = sorted(client_models)
        if got != expected or sorted(sample_counts) != expected:
            missing = sorted(set(expected) - set(client_models))
            raise MissingClient(f"round requires all clients; missing {missing or got}")
        ordered = [client_models[k] for k in expected]
        dequantized = dequantize_client_models(ordered)
        if self.global_model is not None:
            shapes = [layer.shape for layer in self.global_model]
            if [layer.shape for layer in dequantized[0]] != shapes:
                raise ShapeMismatch("layer shapes changed between rounds")
        self.global_model = aggregate(dequantized, [sample_counts[k] for k in expected])
        out = {}
        errors = {}
        for k in expected:
            model, eps_r_sq = requantize_for_client(
                self.global_model, self.client_bitwidths[k], self._round_rng(k)
            )
            out[k] = model
            errors[k] = eps_r_sq
        self.requant_error_log.append(errors)
        self.round_counter += 1
        return out
