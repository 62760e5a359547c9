"""Sequence decoder, scoring/loss heads, the full model and alternating training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .augment import augment_many, build_pivot_grid
from .autodiff import Adam, NonFiniteError, attention, l2_normalize
from .data import Dataset, InteractionSequence, SplitDataset
from .diffusion import DiffusionGenerator, diffusion_loss
from .graph_ode import EdgeBatch, GraphEncoder, OdeFunction, integrate_rk4
from .graphs import build_item_evolution_graph, build_user_time_graph, edge_arrays

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    iters: int = 10
    inner_epochs: int = 1
    d: int = 64
    d_z: int = 32
    K: int = 5
    m: int = 8
    layers: int = 2
    steps: int = 4
    lambda_reg: float = 1e-4
    lambda_vae: float = 1e-3
    lambda_recon: float = 1.0
    seed: int = 0
    heads: int = 2
    tau: float = 0.07
    time_dim: int = 16
    gen_hidden: int = 64
    max_len: int = 50
    cs_grid: int = 32
    use_diff: bool = True
    use_ode: bool = True
    use_cs: bool = True
    float32: bool = False

    def __post_init__(self):
        positive = ("lr", "batch_size", "d", "d_z", "K", "m", "layers", "steps", "heads", "tau",
                    "time_dim", "gen_hidden", "max_len", "cs_grid")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("iters", "inner_epochs", "lambda_reg", "lambda_vae", "lambda_recon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.float32 else torch.float64

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


VARIANTS = {
    "full": {},
    "base": {"use_diff": False, "use_ode": False, "use_cs": False},
    "no-diff": {"use_diff": False},
    "no-ode": {"use_ode": False},
    "no-cs": {"use_cs": False},
}


def variant(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(cfg, **VARIANTS[name])


@dataclass
class Example:
    prefix: InteractionSequence
    t_target: float
    target: int
    edges: tuple  # (src, dst, time, weight) arrays of the user's temporal graph


class SequenceDecoder(nn.Module):
    """One pre-norm causal self-attention block; returns the last position's output."""

    def __init__(self, d: int, heads: int = 2, max_len: int = 50):
        super().__init__()
        self.d, self.heads, self.max_len = d, heads, max_len
        self.pos = nn.Embedding(max_len, d)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """x: B x L x d left-padded, valid: B x L bool. Returns B x d."""
        B, L, d = x.shape
        recency = torch.arange(L - 1, -1, -1).clamp_max(self.max_len - 1)
        h = x + self.pos(recency)
        causal = torch.ones(L, L, dtype=torch.bool).tril()
        mask = causal & (valid.unsqueeze(1) | torch.eye(L, dtype=torch.bool))
        q, k, v = self.qkv(self.ln1(h)).view(B, L, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        a = attention(q, k, v, mask.unsqueeze(1))
        h = h + self.attn_out(a.transpose(1, 2).reshape(B, L, d))
        h = h + self.ff(self.ln2(h))
        return self.proj(h[:, -1])


def decode_sequence(rows_us: torch.Tensor, rows_cs: torch.Tensor | None, valid: torch.Tensor,
                    decoder: SequenceDecoder) -> torch.Tensor:
    """normalize(Decoder(us rows)) + normalize(Decoder(cs rows)); the cs term is dropped when absent."""
    h = l2_normalize(decoder(rows_us, valid))
    if rows_cs is not None:
        h = h + l2_normalize(decoder(rows_cs, valid))
    return h


def cosine_logits(h_s: torch.Tensor, items: torch.Tensor, tau: float) -> torch.Tensor:
    """h_s: B x d, items: B x V x d (or V x d). Returns B x V cosine / tau."""
    hn = l2_normalize(h_s)
    en = l2_normalize(items)
    if en.dim() == 2:
        return hn @ en.T / tau
    return torch.einsum("bd,bvd->bv", hn, en) / tau


def predict_scores(h_s: torch.Tensor, items: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return torch.softmax(cosine_logits(h_s, items, tau), dim=-1)


def rec_loss(y_hat: torch.Tensor, target: torch.Tensor | int, clamp: float = 1e-12) -> torch.Tensor:
    """-sum_v [y_v log p_v + (1 - y_v) log(1 - p_v)] with one-hot y; mean over the batch."""
    single = y_hat.dim() == 1
    p = y_hat.unsqueeze(0) if single else y_hat
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    V = p.shape[-1]
    if bool((target < 0).any()) or bool((target >= V).any()):
        raise ValueError(f"target index out of range [0, {V})")
    y = torch.zeros_like(p).scatter(1, target.view(-1, 1), 1.0)
    ll = y * torch.log(p.clamp_min(clamp)) + (1 - y) * torch.log((1 - p).clamp_min(clamp))
    return -ll.sum(-1).mean()


class TGODE(nn.Module):
    """Recommender parameters (item embeddings, graph encoder, ODE, decoder) plus the generator."""

    def __init__(self, num_items: int, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.num_items = num_items
        d = cfg.d
        self.item_emb = nn.Parameter(torch.randn(num_items, d) * d ** -0.5)
        self.encoder = GraphEncoder(d, cfg.time_dim)
        self.ode = OdeFunction(d, cfg.time_dim, cfg.layers, cfg.use_cs)
        self.decoder = SequenceDecoder(d, cfg.heads, cfg.max_len)
        self.generator = DiffusionGenerator(num_items, d, cfg.d_z, cfg.gen_hidden, cfg.K, cfg.time_dim)
        self.register_buffer("cs_src", torch.zeros(0, dtype=torch.long))
        self.register_buffer("cs_dst", torch.zeros(0, dtype=torch.long))
        self.register_buffer("cs_time", torch.zeros(0))

    @property
    def dtype(self) -> torch.dtype:
        return self.item_emb.dtype

    def set_item_graph(self, graph) -> None:
        src, dst, time, _ = edge_arrays(graph.edges)
        self.cs_src = torch.from_numpy(src)
        self.cs_dst = torch.from_numpy(dst)
        self.cs_time = torch.from_numpy(time).to(self.dtype)

    def rec_named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("generator.")]

    # ---- forward pieces -------------------------------------------------

    def _encode_cs(self, x: torch.Tensor, t_last: torch.Tensor) -> torch.Tensor:
        n = self.cfg.cs_grid
        snapped = torch.floor(t_last * (n - 1) + 1e-9) / (n - 1)
        uniq, inv = torch.unique(snapped, return_inverse=True)
        U, E = len(uniq), len(self.cs_src)
        edges = EdgeBatch(
            torch.arange(U).repeat_interleave(E), self.cs_src.repeat(U), self.cs_dst.repeat(U),
            self.cs_time.repeat(U), torch.ones(U * E, dtype=x.dtype), U,
        )
        return self.encoder(x, edges, uniq, inclusive=False)[inv]

    def evolve(self, examples: Sequence[Example]):
        """Initial encodings at each example's last interaction, evolved to its target time."""
        dtype = self.dtype
        t_last = torch.tensor([ex.prefix.norm_times[-1] for ex in examples], dtype=dtype)
        t_target = torch.tensor([ex.t_target for ex in examples], dtype=dtype)
        edges = EdgeBatch.from_arrays([ex.edges for ex in examples], dtype=dtype)
        x = self.item_emb
        e_us = self.encoder(x, edges, t_last, inclusive=True)
        e_cs = self._encode_cs(x, t_last) if self.cfg.use_cs else None
        if not self.cfg.use_ode:
            return e_us, e_cs
        if e_cs is None:
            return integrate_rk4(lambda t, y: self.ode(t, y, None, edges), e_us, t_last, t_target, self.cfg.steps), None

        def field(t, state):
            drift = self.ode(t, state[0], state[1], edges)
            return drift, drift

        e_us, e_cs = integrate_rk4(field, (e_us, e_cs), t_last, t_target, self.cfg.steps)
        return e_us, e_cs

    def _gather_sequences(self, E: torch.Tensor, examples: Sequence[Example]):
        L = min(self.cfg.max_len, max(len(ex.prefix) for ex in examples))
        idx = torch.zeros(len(examples), L, dtype=torch.long)
        valid = torch.zeros(len(examples), L, dtype=torch.bool)
        for b, ex in enumerate(examples):
            items = ex.prefix.items[-L:]
            idx[b, L - len(items):] = torch.tensor(items)
            valid[b, L - len(items):] = True
        rows = E.gather(1, idx.unsqueeze(-1).expand(-1, -1, E.shape[-1]))
        return rows, valid

    def sequence_representation(self, examples: Sequence[Example]):
        e_us, e_cs = self.evolve(examples)
        rows_us, valid = self._gather_sequences(e_us, examples)
        rows_cs = self._gather_sequences(e_cs, examples)[0] if e_cs is not None else None
        return decode_sequence(rows_us, rows_cs, valid, self.decoder), e_us

    def logits(self, examples: Sequence[Example]) -> torch.Tensor:
        h_s, e_us = self.sequence_representation(examples)
        return cosine_logits(h_s, e_us, self.cfg.tau)

    def forward(self, examples: Sequence[Example]) -> torch.Tensor:
        return torch.softmax(self.logits(examples), dim=-1)

    def loss(self, examples: Sequence[Example]) -> torch.Tensor:
        target = torch.tensor([ex.target for ex in examples], dtype=torch.long)
        return rec_loss(self(examples), target)

    @torch.no_grad()
    def hs_fn(self, prefixes: Sequence[InteractionSequence], times: Sequence[float]) -> torch.Tensor:
        """h_s^t for each (prefix, t) using the prefix's own user time graph; zeros for empty prefixes."""
        out = torch.zeros(len(prefixes), self.cfg.d, dtype=self.dtype)
        live = [n for n, p in enumerate(prefixes) if len(p)]
        if live:
            exs = [Example(prefixes[n], times[n], -1, edge_arrays(build_user_time_graph(prefixes[n]).edges))
                   for n in live]
            out[live] = self.sequence_representation(exs)[0]
        return out


class TrainingError(RuntimeError):
    def __init__(self, phase: str, iteration: int, batch: int, cause: Exception):
        super().__init__(f"{phase} phase, iteration {iteration}, batch {batch}: {cause}")
        self.phase, self.iteration, self.batch = phase, iteration, batch
        self.report = getattr(cause, "report", {})


@dataclass
class TrainTarget:
    user_index: int
    prefix: InteractionSequence
    t_target: float
    item: int


def training_targets(d: Dataset) -> list[TrainTarget]:
    """Every interaction from the second one on, with its strictly-earlier prefix."""
    out = []
    for s in d.sequences:
        for j in range(1, len(s)):
            prefix = s.before(s.norm_times[j])
            if len(prefix):
                out.append(TrainTarget(s.user_index, prefix, s.norm_times[j], s.items[j]))
    return out


def user_graphs(d: Dataset) -> dict[int, object]:
    return {s.user_index: build_user_time_graph(s) for s in d.sequences}


def augment_user_graphs(model: TGODE, d: Dataset) -> dict[int, object]:
    seqs = d.sequences
    grids = [build_pivot_grid(s, model.cfg.m) for s in seqs]
    graphs = augment_many(seqs, grids, model.generator, model.hs_fn)
    return {g.user_index: g for g in graphs}


def _batches(n: int, size: int) -> list[torch.Tensor]:
    perm = torch.randperm(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def build_model(num_items: int, cfg: TrainConfig) -> TGODE:
    torch.manual_seed(cfg.seed)
    return TGODE(num_items, cfg).to(cfg.dtype)


def train_tgode(split: SplitDataset | Dataset, cfg: TrainConfig,
                on_epoch: Callable[[dict], None] | None = None) -> tuple[TGODE, list[dict]]:
    """Alternate generator and recommender phases for ``cfg.iters`` outer iterations.

    Returns the model and one report record per epoch
    ``{phase, iter, epoch, loss}``. The global torch RNG is forked, so the run
    is reproducible from ``cfg.seed`` alone and leaves caller RNG untouched.
    """
    train = split.train if isinstance(split, SplitDataset) else split
    if train.num_interactions == 0:
        raise ValueError("empty training split")
    with torch.random.fork_rng():
        model = build_model(train.item_vocab_size, cfg)
        model.set_item_graph(build_item_evolution_graph(train))
        targets = training_targets(train)
        graphs = user_graphs(train)
        rec_opt = Adam(model.rec_named_parameters(), lr=cfg.lr)
        diff_opt = Adam(list(model.generator.named_parameters()), lr=cfg.lr)
        report: list[dict] = []

        def record(phase, it, ep, losses):
            rec = {"phase": phase, "iter": it, "epoch": ep, "loss": float(np.mean(losses)) if losses else float("nan")}
            report.append(rec)
            log.info("%s iter %d epoch %d loss %.5f", phase, it, ep, rec["loss"])
            if on_epoch:
                on_epoch(rec)

        for it in range(cfg.iters):
            if cfg.use_diff:
                for ep in range(cfg.inner_epochs):
                    losses = []
                    for bi, idx in enumerate(_batches(len(targets), cfg.batch_size)):
                        batch = [targets[i] for i in idx.tolist()]
                        try:
                            loss = generator_batch_loss(model, batch)
                            diff_opt.zero_grad()
                            loss.backward()
                            diff_opt.step()
                        except NonFiniteError as exc:
                            raise TrainingError("diffusion", it, bi, exc) from exc
                        losses.append(loss.item())
                    record("diffusion", it, ep, losses)
                graphs = augment_user_graphs(model, train)
            arrays = {u: edge_arrays(g.edges) for u, g in graphs.items()}
            for ep in range(cfg.inner_epochs):
                losses = []
                for bi, idx in enumerate(_batches(len(targets), cfg.batch_size)):
                    batch = [Example(targets[i].prefix, targets[i].t_target, targets[i].item,
                                     arrays[targets[i].user_index]) for i in idx.tolist()]
                    try:
                        loss = model.loss(batch)
                        if not bool(torch.isfinite(loss)):
                            raise NonFiniteError("non-finite recommendation loss")
                        rec_opt.zero_grad()
                        loss.backward()
                        rec_opt.step()
                    except NonFiniteError as exc:
                        raise TrainingError("recommender", it, bi, exc) from exc
                    losses.append(loss.item())
                record("recommender", it, ep, losses)
    return model, report


def generator_batch_loss(model: TGODE, batch: Sequence[TrainTarget]) -> torch.Tensor:
    gen = model.generator
    dtype = model.dtype
    V = model.num_items
    a_rows = torch.zeros(len(batch), V, dtype=dtype)
    for b, tt in enumerate(batch):
        for item in tt.prefix.items:
            a_rows[b, item] += 1.0
    times = [tt.t_target for tt in batch]
    h_s = model.hs_fn([tt.prefix for tt in batch], times)
    c_t = gen.time_codec(torch.tensor(times, dtype=dtype))
    target = torch.tensor([tt.item for tt in batch], dtype=torch.long)
    cfg = model.cfg
    return diffusion_loss(gen, a_rows, h_s, c_t, target, lambda_reg=cfg.lambda_reg,
                          lambda_vae=cfg.lambda_vae, lambda_recon=cfg.lambda_recon).total


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
