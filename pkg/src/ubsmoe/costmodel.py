"""Analytic computation and communication costs for heterogeneous federated fine-tuning.

Formulas are the asymptotic expressions with unit leading constants.  Two
conventions are applied on top:

* the SMoE client formula doubles the expert term (forward + backward);
* ``end_to_end_flops`` counts a whole training pass over a decoder with
  attention, router, experts, LoRA and LM head, each matmul as one
  multiply-accumulate, times 2 for forward + backward.  Only ratios between
  its outputs are meaningful.

Sequence length multiplies the batch size: ``tokens = batch * seq_len``.
"""

from __future__ import annotations

from dataclasses import dataclass

SPARSITY_METHODS = ("ubsmoe", "a3smoe")
RANK_METHODS = ("flora", "hetlora", "flexlora", "florist")
METHODS = SPARSITY_METHODS + RANK_METHODS


@dataclass(frozen=True)
class ModelDims:
    d: int = 2048
    l: int = 2048
    L_layers: int = 16
    M: int = 64
    r: int = 20
    r_c: int = 20
    gamma: int = 1
    batch: int = 1
    clients: int = 8
    n_p: int = 2
    seq_len: int = 256
    r_max: int = 20
    truncated_rank: int = 20  # FLoRIST's p

    def __post_init__(self):
        for name, v in vars(self).items():
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")

    @property
    def tokens(self) -> int:
        return self.batch * self.seq_len


@dataclass(frozen=True)
class CostReport:
    method: str
    budget: float
    client_flops: float
    server_flops: float
    upload_params: float
    download_params: float


def _check_method(method: str, allowed=METHODS) -> None:
    if method not in allowed:
        raise ValueError(f"unknown method {method!r}; expected one of {allowed}")


def expert_component_flops(dims: ModelDims, k_c: int) -> float:
    """The sparsity-dependent expert term of the SMoE client cost."""
    return float(dims.gamma * dims.tokens * dims.L_layers * 2 * k_c * dims.d * dims.l)


def client_cost_ubsmoe(dims: ModelDims, k_c: int, pseudo_gradients: bool = True) -> float:
    if not 1 <= k_c <= dims.M:
        raise ValueError(f"k_c={k_c} outside [1, {dims.M}]")
    routing = dims.gamma * dims.tokens * dims.L_layers * dims.M * dims.d
    pg = dims.gamma * dims.L_layers * dims.M * dims.r * (dims.d + dims.l) if pseudo_gradients else 0
    return float(routing + pg) + expert_component_flops(dims, k_c)


def client_cost_lora_rank(dims: ModelDims, r_c: int, method: str) -> float:
    _check_method(method, RANK_METHODS)
    if r_c < 0:
        raise ValueError("r_c must be nonnegative")
    dl = dims.d + dims.l
    cost = dims.gamma * dims.tokens * dims.L_layers * (dims.d * dims.l + r_c * dl)
    if method == "hetlora":
        cost += dims.L_layers * r_c * dl
    return float(cost)


def client_cost(dims: ModelDims, method: str, k_c: int | None = None, r_c: int | None = None) -> float:
    _check_method(method)
    if method in SPARSITY_METHODS:
        return client_cost_ubsmoe(dims, dims.M if k_c is None else k_c, pseudo_gradients=method == "ubsmoe")
    return client_cost_lora_rank(dims, dims.r_c if r_c is None else r_c, method)


def comm_cost(dims: ModelDims, method: str, direction: str) -> float:
    """Parameters exchanged per client per round (``upload`` or ``download``)."""
    _check_method(method)
    if direction not in ("upload", "download"):
        raise ValueError(f"unknown direction {direction!r}")
    L, M = dims.L_layers, dims.M
    dl = dims.d + dims.l
    experts = L * M * dims.r * dl
    if method == "ubsmoe":
        return float(experts + L * (M + 1) if direction == "upload" else 2 * experts + L * M)
    if method == "a3smoe":
        return float(experts + L * M if direction == "upload" else experts)
    if method == "florist" and direction == "download":
        return float(L * dims.truncated_rank * dl)
    return float(L * dims.r_c * dl)


def server_cost(dims: ModelDims, method: str) -> float:
    _check_method(method)
    C, L, M = dims.clients, dims.L_layers, dims.M
    d, l, dl = dims.d, dims.l, dims.d + dims.l
    if method == "ubsmoe":
        # modulation updates need utilization uploads, so nothing happens with no clients
        return float(C * L * M * dims.r * dl + (L * M if C > 0 else 0))
    if method == "a3smoe":
        return float(C * L * M * dims.r * dl)
    if method == "flora":
        return float(C * L * dims.r_max * dl)
    if method == "hetlora":
        return float(C * L * dims.r_max * d * l)
    if method == "flexlora":
        return float(C * L * (d * d * l + dims.r_max * d * l))
    big_r = C * dims.r_c  # stacked rank across clients
    return float(L * big_r**2 * (dl + big_r) + L * dims.truncated_rank * big_r * dl)


def end_to_end_flops(
    dims: ModelDims,
    k_active: int,
    rank: int,
    pseudo_gradients: bool = False,
    vocab: int = 50304,
    attention_lora: bool = True,
) -> float:
    """Training FLOPs for one step over ``dims.tokens`` tokens of an SMoE decoder."""
    d, l, L = dims.d, dims.l, dims.L_layers
    per_token_layer = (
        4 * d * d  # q, k, v, o projections
        + 2 * dims.seq_len * d  # scores and weighted values
        + dims.M * d  # router
        + k_active * d * l  # activated experts
        + k_active * rank * (d + l)  # expert adapters
        + (4 * rank * 2 * d if attention_lora else 0)
    )
    fwd = dims.tokens * (L * per_token_layer + vocab * d)
    total = 2.0 * fwd
    if pseudo_gradients:
        total += L * (dims.M - k_active) * rank * (d + l)
    return float(total)


def report(dims: ModelDims, budgets, k_values, ranks) -> list[CostReport]:
    """One row per method and budget tier; sparsity methods use ``k_values``, rank methods ``ranks``."""
    rows = []
    for method in METHODS:
        for beta, k_c, r_c in zip(budgets, k_values, ranks):
            tier = ModelDims(**{**vars(dims), "r_c": r_c})
            rows.append(
                CostReport(
                    method,
                    beta,
                    client_cost(tier, method, k_c=k_c, r_c=r_c),
                    server_cost(tier, method),
                    comm_cost(tier, method, "upload"),
                    comm_cost(tier, method, "download"),
                )
            )
    return rows
