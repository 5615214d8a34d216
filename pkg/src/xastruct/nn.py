"""Neural building blocks: gated linear units, SwiGLU stacks, conv blocks,
and a message-passing encoder that turns a structure graph into per-node
embeddings.

Layer classes own their Parameters and expose named_parameters() for the
optimizer and checkpoints. Forward passes are built entirely from autodiff
ops, so gradients come for free.
"""

import math

import numpy as np

from .autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    add,
    avg_pool1d,
    batch_norm_1d,
    concat,
    conv1d,
    gather_rows,
    layer_norm,
    linear,
    masked_mean,
    matmul,
    mul,
    relu,
    sigmoid,
    swish_beta,
)
from .crystal import StructureGraph

N_ELEMENTS = 118


def glorot_uniform(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class GatedLinearLayer:
    """(W_v x + b_v) * sigmoid(W_g x + b_g)."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.W_v = Parameter(glorot_uniform(rng, (d_out, d_in), d_in, d_out))
        self.W_g = Parameter(glorot_uniform(rng, (d_out, d_in), d_in, d_out))
        self.b_v = Parameter(np.zeros(d_out))
        self.b_g = Parameter(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return mul(linear(x, self.W_v, self.b_v), sigmoid(linear(x, self.W_g, self.b_g)))

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            f"{prefix}W_v": self.W_v,
            f"{prefix}W_g": self.W_g,
            f"{prefix}b_v": self.b_v,
            f"{prefix}b_g": self.b_g,
        }


class SwiGLULayer:
    """swish_beta(x W_g + b_g) * (x W_v + b_v), with beta learnable."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.W_v = Parameter(glorot_uniform(rng, (d_out, d_in), d_in, d_out))
        self.W_g = Parameter(glorot_uniform(rng, (d_out, d_in), d_in, d_out))
        self.b_v = Parameter(np.zeros(d_out))
        self.b_g = Parameter(np.zeros(d_out))
        self.beta = Parameter(np.array(1.0))

    def __call__(self, x) -> Tensor:
        gate = swish_beta(linear(x, self.W_g, self.b_g), self.beta)
        return mul(gate, linear(x, self.W_v, self.b_v))

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            f"{prefix}W_v": self.W_v,
            f"{prefix}W_g": self.W_g,
            f"{prefix}b_v": self.b_v,
            f"{prefix}b_g": self.b_g,
            f"{prefix}beta": self.beta,
        }


class SBlock:
    """SwiGLU(LayerNorm(GatedLinear(x)))."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.gated = GatedLinearLayer(rng, d_in, d_out)
        self.ln_gain = Parameter(np.ones(d_out))
        self.ln_bias = Parameter(np.zeros(d_out))
        self.swiglu = SwiGLULayer(rng, d_out, d_out)

    def __call__(self, x) -> Tensor:
        return self.swiglu(layer_norm(self.gated(x), self.ln_gain, self.ln_bias))

    def named_parameters(self, prefix: str = "") -> dict:
        out = self.gated.named_parameters(f"{prefix}gated.")
        out[f"{prefix}ln_gain"] = self.ln_gain
        out[f"{prefix}ln_bias"] = self.ln_bias
        out.update(self.swiglu.named_parameters(f"{prefix}swiglu."))
        return out


class SGMLP:
    """k-layer gated MLP: (k-1) SBlocks followed by a final GatedLinear.

    k = 1 degenerates to a single GatedLinear from d_in to d_out.
    """

    def __init__(self, rng, d_in: int, hidden: int, d_out: int, k: int):
        if k < 1:
            raise ValueError(f"SGMLP depth k must be >= 1, got {k}")
        self.blocks = []
        width = d_in
        for _ in range(k - 1):
            self.blocks.append(SBlock(rng, width, hidden))
            width = hidden
        self.final = GatedLinearLayer(rng, width, d_out)

    def __call__(self, x) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.final(x)

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}block{i}."))
        out.update(self.final.named_parameters(f"{prefix}final."))
        return out


class ConvBlock:
    """AvgPool(ReLU(BatchNorm(Conv1D(z)))): [B, c_in, L] -> [B, c_out, L//2]."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3):
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.W = Parameter(glorot_uniform(rng, (c_out, c_in, kernel), fan_in, fan_out))
        self.b = Parameter(np.zeros(c_out))
        self.bn_gamma = Parameter(np.ones(c_out))
        self.bn_beta = Parameter(np.zeros(c_out))
        self.bn_state = BatchNormState(c_out)

    def __call__(self, x, training: bool) -> Tensor:
        y = conv1d(x, self.W, self.b)
        y = batch_norm_1d(y, self.bn_gamma, self.bn_beta, self.bn_state, training)
        return avg_pool1d(relu(y))

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            f"{prefix}W": self.W,
            f"{prefix}b": self.b,
            f"{prefix}bn_gamma": self.bn_gamma,
            f"{prefix}bn_beta": self.bn_beta,
        }

    def named_buffers(self, prefix: str = "") -> dict:
        return {
            f"{prefix}bn_running_mean": self.bn_state.running_mean,
            f"{prefix}bn_running_var": self.bn_state.running_var,
        }

    def load_buffers(self, arrays: dict, prefix: str = "") -> None:
        self.bn_state.running_mean = np.array(arrays[f"{prefix}bn_running_mean"], dtype=float)
        self.bn_state.running_var = np.array(arrays[f"{prefix}bn_running_var"], dtype=float)


def rbf_features(distances, centers: np.ndarray, width: float) -> np.ndarray:
    """Gaussian radial basis: exp(-((d - c)/width)^2), one column per center.

    Values lie in (0, 1]; a distance exactly at a center scores 1 there.
    """
    d = np.asarray(distances, dtype=float).reshape(-1, 1)
    return np.exp(-(((d - centers[None, :]) / width) ** 2))


class MPEncoder:
    """Message-passing encoder over a structure graph.

    T rounds of: m_ij = SGMLP([h_i | h_j | rbf(d_ij)]), summed over the
    neighbors of i, then h_i <- LayerNorm(h_i + SGMLP([h_i | sum_j m_ij])).
    Node features start from a per-element embedding table. Permutation
    equivariant: relabeling nodes relabels rows of the output.
    """

    def __init__(
        self,
        rng,
        d: int = 64,
        t_rounds: int = 3,
        n_rbf: int = 16,
        hidden: int = None,
        k: int = 2,
        r_max: float = 6.0,
        n_elements: int = N_ELEMENTS,
    ):
        hidden = hidden or d
        self.d = d
        self.centers = np.linspace(0.0, r_max, n_rbf)
        self.width = self.centers[1] - self.centers[0]
        self.embedding = Parameter(glorot_uniform(rng, (n_elements + 1, d), d, d))
        self.rounds = []
        for _ in range(t_rounds):
            self.rounds.append(
                {
                    "message": SGMLP(rng, 2 * d + n_rbf, hidden, d, k),
                    "update": SGMLP(rng, 2 * d, hidden, d, k),
                    "ln_gain": Parameter(np.ones(d)),
                    "ln_bias": Parameter(np.zeros(d)),
                }
            )

    def __call__(self, g: StructureGraph) -> Tensor:
        n_nodes = len(g.node_elements)
        if n_nodes == 0:
            raise ValueError("cannot encode an empty graph")
        z = [el.atomic_number for el in g.node_elements]
        H = gather_rows(self.embedding, z)

        idx_i = np.array([e.i for e in g.edges], dtype=int)
        idx_j = np.array([e.j for e in g.edges], dtype=int)
        dists = np.array([e.distance for e in g.edges], dtype=float)
        feats = Tensor(rbf_features(dists, self.centers, self.width))
        # receiver matrix: row i sums the messages arriving at node i
        receive = np.zeros((n_nodes, len(g.edges)))
        if len(g.edges):
            receive[idx_i, np.arange(len(g.edges))] = 1.0
        receive = Tensor(receive)

        for rnd in self.rounds:
            h_i = gather_rows(H, idx_i)
            h_j = gather_rows(H, idx_j)
            messages = rnd["message"](concat([h_i, h_j, feats], axis=1))
            agg = matmul(receive, messages)
            update = rnd["update"](concat([H, agg], axis=1))
            H = layer_norm(add(H, update), rnd["ln_gain"], rnd["ln_bias"])
        return H

    def pooled(self, g: StructureGraph, by_mask_sum: bool = False) -> Tensor:
        """Masked mean of the node embeddings: the graph-level vector."""
        return masked_mean(self(g), Tensor(g.mask), by_mask_sum=by_mask_sum)

    def named_parameters(self, prefix: str = "") -> dict:
        out = {f"{prefix}embedding": self.embedding}
        for t, rnd in enumerate(self.rounds):
            out.update(rnd["message"].named_parameters(f"{prefix}round{t}.message."))
            out.update(rnd["update"].named_parameters(f"{prefix}round{t}.update."))
            out[f"{prefix}round{t}.ln_gain"] = rnd["ln_gain"]
            out[f"{prefix}round{t}.ln_bias"] = rnd["ln_bias"]
        return out
