"""Hierarchical latent-variable encoder/decoder for sequential classification.

The latent path projects label-concatenated features, runs per-task
self-attention to get order-invariant within-task encodings, cross-attends
across all encodings to mix tasks, and parameterizes a global Gaussian plus
one task-specific Gaussian per task head, the latter conditioned on the
global samples. The deterministic path cross-attends targets over context
the way attentive neural processes do. The decoder maps
[target feature; deterministic summary; latent sample] rows to class logits.

Variants:
    npcl     full hierarchy (global + per-task latents, both attentions)
    st_npcl  per-task latents only (no cross-attention, no global head)
    anp      single global latent, attention everywhere, deterministic path
    np       single global latent, mean pooling, no deterministic path
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .distributions import VAR_FLOOR, DiagGaussian, reparam_sample
from .tensor import ParameterStore, Tensor, xavier_uniform


VARIANTS = ("npcl", "st_npcl", "np", "anp")


class NoContextError(ValueError):
    """Inference was attempted without any context points (empty replay buffer)."""


@dataclass
class ModelConfig:
    input_dim: int
    feature_dim: int
    hidden_dim: int
    class_count_per_task: tuple
    num_hidden: int = 2
    n_train: int = 5
    n_eval: int = 10
    m_task: int = 1
    variant: str = "npcl"
    attention_heads: int = 4
    shared_classes: bool = False

    def __post_init__(self):
        self.class_count_per_task = tuple(int(c) for c in self.class_count_per_task)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.hidden_dim % self.attention_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} must be divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if min(self.n_train, self.n_eval, self.m_task) < 1:
            raise ValueError("n_train, n_eval, and m_task must all be >= 1")

    @property
    def num_tasks(self) -> int:
        return len(self.class_count_per_task)

    @property
    def total_classes(self) -> int:
        if self.shared_classes:
            return self.class_count_per_task[0]
        return sum(self.class_count_per_task)


@dataclass
class LatentBundle:
    """Monte Carlo samples and the Gaussians they were drawn from."""

    q_global: Optional[DiagGaussian]
    z_global: Optional[Tensor]
    q_task: dict
    z_task: dict
    present: list
    s_task_mean: dict = field(default_factory=dict)

    def dist_set(self) -> "DistSet":
        return DistSet(self.q_global, dict(self.q_task))


@dataclass
class DistSet:
    """A global Gaussian plus per-task Gaussians, as one encoder pass emits."""

    global_dist: Optional[DiagGaussian]
    task_dists: dict


@dataclass
class TrainForward:
    """Everything the training objective needs from one forward pass."""

    blocks: list  # (task_id or None, target row indices, flat logits Tensor)
    rows_per_target: int
    posterior: DistSet
    prior: DistSet
    bundle: LatentBundle


@dataclass
class InferResult:
    heads: dict  # head id -> flat logits Tensor of shape (targets * rows, classes)
    rows_per_target: int
    num_targets: int
    attention: Optional[np.ndarray]

    def head_logits(self, head: int, target: int) -> np.ndarray:
        r = self.rows_per_target
        return self.heads[head].data[target * r: (target + 1) * r]


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): {labels}")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def attention_triples(weights: np.ndarray) -> list:
    """Flatten an attention matrix into (target index, context index, weight) triples."""
    triples = []
    for ti in range(weights.shape[0]):
        for ci in range(weights.shape[1]):
            triples.append([int(ti), int(ci), float(weights[ti, ci])])
    return triples


class MLP:
    """Stack of fully connected layers with layer norm + ReLU, plain linear output."""

    def __init__(self, store: ParameterStore, prefix: str, d_in: int, d_out: int,
                 hidden: int, num_hidden: int, rng: np.random.Generator):
        self._layers = []
        d = d_in
        for i in range(num_hidden):
            w = store.create(f"{prefix}.fc{i}.w", xavier_uniform(rng, d, hidden))
            b = store.create(f"{prefix}.fc{i}.b", np.zeros(hidden))
            gain = store.create(f"{prefix}.fc{i}.ln_gain", np.ones(hidden))
            bias = store.create(f"{prefix}.fc{i}.ln_bias", np.zeros(hidden))
            self._layers.append((w, b, gain, bias))
            d = hidden
        self.w_out = store.create(f"{prefix}.out.w", xavier_uniform(rng, d, d_out))
        self.b_out = store.create(f"{prefix}.out.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, gain, bias in self._layers:
            x = T.relu(T.layer_norm(T.add(T.matmul(x, w), b), gain, bias))
        return T.add(T.matmul(x, self.w_out), self.b_out)


class Linear:
    def __init__(self, store, prefix, d_in, d_out, rng):
        self.w = store.create(f"{prefix}.w", xavier_uniform(rng, d_in, d_out))
        self.b = store.create(f"{prefix}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections and an output map."""

    def __init__(self, store, prefix, d_query, d_key, d_value, d_out, heads, rng):
        if d_out % heads != 0:
            raise ValueError(f"attention output dim {d_out} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_out // heads
        self._proj = []
        for h in range(heads):
            wq = store.create(f"{prefix}.h{h}.wq", xavier_uniform(rng, d_query, self.d_head))
            wk = store.create(f"{prefix}.h{h}.wk", xavier_uniform(rng, d_key, self.d_head))
            wv = store.create(f"{prefix}.h{h}.wv", xavier_uniform(rng, d_value, self.d_head))
            self._proj.append((wq, wk, wv))
        self.w_out = store.create(f"{prefix}.wo", xavier_uniform(rng, d_out, d_out))
        self.b_out = store.create(f"{prefix}.bo", np.zeros(d_out))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor):
        scale = 1.0 / np.sqrt(self.d_head)
        outs = []
        weight_sum = None
        for wq, wk, wv in self._proj:
            q = T.matmul(query, wq)
            k = T.matmul(key, wk)
            v = T.matmul(value, wv)
            scores = T.mul(T.matmul(q, T.transpose(k)), scale)
            attn = T.softmax(scores, axis=-1)
            outs.append(T.matmul(attn, v))
            weight_sum = attn.data if weight_sum is None else weight_sum + attn.data
        out = T.add(T.matmul(T.concat(outs, axis=1), self.w_out), self.b_out)
        return out, weight_sum / self.heads


class NPCLModel:
    """Encoder/decoder with task-head latents; see module docstring for variants."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.cfg = config
        self.store = ParameterStore()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA11CE]))
        c = config
        f, o, heads = c.feature_dim, c.hidden_dim, c.attention_heads
        n_cls = c.total_classes

        self.backbone = MLP(self.store, "backbone", c.input_dim, f, f, 1, rng)
        self.mlp_lat = MLP(self.store, "lat.proj", f + n_cls, o, o, c.num_hidden, rng)

        self.sa_lat = None
        self.ca_lat = None
        if c.variant != "np":
            self.sa_lat = MultiHeadAttention(self.store, "lat.self_attn", o, o, o, o, heads, rng)
        if c.variant == "npcl":
            self.ca_lat = MultiHeadAttention(self.store, "lat.cross_attn", o, o, o, o, heads, rng)

        self.psi_g_mean = self.psi_g_var = None
        if c.variant != "st_npcl":
            self.psi_g_mean = Linear(self.store, "lat.global_head.mean", o, o, rng)
            self.psi_g_var = Linear(self.store, "lat.global_head.var", o, o, rng)

        self.psi_t_mean = {}
        self.psi_t_var = {}
        if c.variant in ("npcl", "st_npcl"):
            d_psi = 2 * o if c.variant == "npcl" else o
            for t in range(c.num_tasks):
                self.psi_t_mean[t] = Linear(self.store, f"lat.task_head{t}.mean", d_psi, o, rng)
                self.psi_t_var[t] = Linear(self.store, f"lat.task_head{t}.var", d_psi, o, rng)

        self.mlp_det = self.sa_det = self.ca_det = None
        if c.variant != "np":
            self.mlp_det = MLP(self.store, "det.proj", f + n_cls, o, o, c.num_hidden, rng)
            self.sa_det = MultiHeadAttention(self.store, "det.self_attn", o, o, o, o, heads, rng)
            self.ca_det = MultiHeadAttention(self.store, "det.cross_attn", f, f, o, o, heads, rng)

        dec_in = f + (o if c.variant == "np" else 2 * o)
        self.decoder = MLP(self.store, "decoder", dec_in, n_cls, o, c.num_hidden, rng)
        self.last_cross_attention: Optional[np.ndarray] = None

    # ---- basics ---------------------------------------------------------

    def num_params(self) -> int:
        return self.store.num_scalars()

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return self.backbone(x)

    def load_state(self, path):
        loaded = T.load_checkpoint(path)
        if loaded.names() != self.store.names():
            raise ValueError("checkpoint parameter names do not match this model")
        for name, p in self.store.items():
            src = loaded[name]
            if src.data.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            p.data[...] = src.data
        self.store.step = loaded.step

    def save_state(self, path):
        T.save_checkpoint(self.store, path)

    def _check_tasks(self, task_ids: np.ndarray):
        if task_ids.size == 0:
            raise ValueError("empty input set")
        bad = [int(t) for t in np.unique(task_ids) if t < 0 or t >= self.cfg.num_tasks]
        if bad:
            raise ValueError(f"unknown task id(s) {bad}; model has {self.cfg.num_tasks} tasks")

    def _variance(self, raw: Tensor) -> Tensor:
        return T.add(T.softplus(raw), VAR_FLOOR)

    # ---- latent path -----------------------------------------------------

    def encode_latent(self, feats: Tensor, labels_onehot: np.ndarray, task_ids,
                      n_samples: int, rng: np.random.Generator, *,
                      z_global: Optional[Tensor] = None,
                      prior_task_remap: Optional[dict] = None) -> LatentBundle:
        """Run the latent path over one labeled set.

        Returns the global Gaussian (unless the variant drops it), one
        Gaussian per present task, and the Monte Carlo samples. ``z_global``
        overrides sampling so callers can condition the task heads on
        externally drawn global samples. ``prior_task_remap`` reroutes each
        head's source encodings to another present task (prior corruption).
        """
        task_ids = np.asarray(task_ids, dtype=np.intp)
        self._check_tasks(task_ids)
        c = self.cfg
        inp = T.concat([feats, Tensor(labels_onehot)], axis=1)
        phi = self.mlp_lat(inp)

        if c.variant in ("np", "anp"):
            if c.variant == "np":
                pooled = T.tmean(phi, axis=0, keepdims=True)
            else:
                s_rows, _ = self.sa_lat(phi, phi, phi)
                pooled = T.tmean(s_rows, axis=0, keepdims=True)
            q_global = DiagGaussian(
                T.reshape(self.psi_g_mean(pooled), (c.hidden_dim,)),
                T.reshape(self._variance(self.psi_g_var(pooled)), (c.hidden_dim,)),
            )
            z_g = z_global if z_global is not None else reparam_sample(q_global, n_samples, rng)
            return LatentBundle(q_global, z_g, {}, {}, sorted(int(t) for t in np.unique(task_ids)))

        present = sorted(int(t) for t in np.unique(task_ids))
        s_parts = []
        s_means = {}
        for t in present:
            idx = np.flatnonzero(task_ids == t)
            phi_t = T.take_rows(phi, idx)
            s_t, _ = self.sa_lat(phi_t, phi_t, phi_t)
            s_parts.append(s_t)
            s_means[t] = T.tmean(s_t, axis=0, keepdims=True)

        q_global = None
        z_g = None
        if c.variant == "npcl":
            s_all = T.concat(s_parts, axis=0)
            s_g_rows, _ = self.ca_lat(s_all, s_all, s_all)
            pooled = T.tmean(s_g_rows, axis=0, keepdims=True)
            q_global = DiagGaussian(
                T.reshape(self.psi_g_mean(pooled), (c.hidden_dim,)),
                T.reshape(self._variance(self.psi_g_var(pooled)), (c.hidden_dim,)),
            )
            z_g = z_global if z_global is not None else reparam_sample(q_global, n_samples, rng)

        q_task = {}
        z_task = {}
        for t in present:
            source = t
            if prior_task_remap is not None:
                source = prior_task_remap.get(t, t)
                if source not in s_means:
                    raise ValueError(f"task remap routes {t} to absent task {source}")
            if c.variant == "npcl":
                n_global = z_g.data.shape[0]
                s_rep = T.tile_rows(s_means[source], n_global)
                head_in = T.concat([s_rep, z_g], axis=1)
                mu_rows = self.psi_t_mean[t](head_in)
                var_rows = self._variance(self.psi_t_var[t](head_in))
                q_task[t] = DiagGaussian(T.tmean(mu_rows, axis=0), T.tmean(var_rows, axis=0))
                mu_rep = T.repeat_rows(mu_rows, c.m_task)
                var_rep = T.repeat_rows(var_rows, c.m_task)
                eps = rng.standard_normal((n_global * c.m_task, c.hidden_dim))
                z_task[t] = T.add(mu_rep, T.mul(T.sqrt(var_rep), Tensor(eps)))
            else:  # st_npcl: per-task Gaussian with no global conditioning
                mu = T.reshape(self.psi_t_mean[t](s_means[source]), (c.hidden_dim,))
                var = T.reshape(self._variance(self.psi_t_var[t](s_means[source])), (c.hidden_dim,))
                q_task[t] = DiagGaussian(mu, var)
                z_task[t] = reparam_sample(q_task[t], n_samples, rng)

        return LatentBundle(q_global, z_g, q_task, z_task, present, s_means)

    # ---- deterministic path ----------------------------------------------

    def encode_deterministic(self, ctx_feats: Tensor, ctx_onehot: np.ndarray,
                             tgt_feats: Tensor):
        """Order-invariant per-target context summary via self + cross attention."""
        if ctx_feats.data.shape[0] == 0:
            raise ValueError("empty context")
        if self.mlp_det is None:
            return None, None
        inp = T.concat([ctx_feats, Tensor(ctx_onehot)], axis=1)
        phi = self.mlp_det(inp)
        r, _ = self.sa_det(phi, phi, phi)
        r_star, weights = self.ca_det(tgt_feats, ctx_feats, r)
        return r_star, weights

    # ---- decoder -----------------------------------------------------------

    def decode(self, tgt_feats: Tensor, r_star: Optional[Tensor], z: Tensor) -> Tensor:
        """Decode every (target, latent sample) pair into a row of class logits.

        Output rows are grouped per target: row t * S + i holds target t under
        sample i, with S the number of latent samples.
        """
        m = tgt_feats.data.shape[0]
        s = z.data.shape[0]
        if tgt_feats.data.shape[1] != self.cfg.feature_dim:
            raise T.ShapeError(
                f"target features have dim {tgt_feats.data.shape[1]}, "
                f"expected {self.cfg.feature_dim}")
        if z.data.shape[1] != self.cfg.hidden_dim:
            raise T.ShapeError(
                f"latent samples have dim {z.data.shape[1]}, expected {self.cfg.hidden_dim}")
        parts = [T.repeat_rows(tgt_feats, s)]
        if self.cfg.variant != "np":
            if r_star is None:
                raise T.ShapeError("this variant's decoder requires the deterministic summary")
            if r_star.data.shape[0] != m:
                raise T.ShapeError(
                    f"deterministic summary rows {r_star.data.shape[0]} != targets {m}")
            parts.append(T.repeat_rows(r_star, s))
        parts.append(T.tile_rows(z, m))
        return self.decoder(T.concat(parts, axis=1))

    # ---- composite passes ---------------------------------------------------

    def forward_train(self, x, y, task_ids, ctx_idx, rng: np.random.Generator,
                      noisy_remap: Optional[dict] = None) -> TrainForward:
        """Posterior pass on the target set, prior pass on the context subset.

        The context must be a subset of the target rows (given by index) and
        must cover every task present in the target set. Task-specific priors
        are conditioned on the same global samples as the posteriors, so
        identical context and target sets give identical Gaussians.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.intp)
        task_ids = np.asarray(task_ids, dtype=np.intp)
        ctx_idx = np.asarray(ctx_idx, dtype=np.intp)
        if ctx_idx.size == 0:
            raise ValueError("empty context")
        c = self.cfg
        onehot = one_hot(y, c.total_classes)
        feats = self.features(x)

        posterior = self.encode_latent(feats, onehot, task_ids, c.n_train, rng)
        ctx_feats = T.take_rows(feats, ctx_idx)
        ctx_onehot = onehot[ctx_idx]
        ctx_tasks = task_ids[ctx_idx]
        missing = set(posterior.present) - set(int(t) for t in np.unique(ctx_tasks))
        if missing and c.variant in ("npcl", "st_npcl"):
            raise ValueError(f"context covers no samples for task(s) {sorted(missing)}")
        prior = self.encode_latent(
            ctx_feats, ctx_onehot, ctx_tasks, c.n_train, rng,
            z_global=posterior.z_global, prior_task_remap=noisy_remap)

        r_star, _ = self.encode_deterministic(ctx_feats, ctx_onehot, feats) \
            if c.variant != "np" else (None, None)

        blocks = []
        if c.variant in ("npcl", "st_npcl"):
            rows = c.n_train * c.m_task if c.variant == "npcl" else c.n_train
            for t in posterior.present:
                idx = np.flatnonzero(task_ids == t)
                tgt_f = T.take_rows(feats, idx)
                tgt_r = T.take_rows(r_star, idx) if r_star is not None else None
                blocks.append((t, idx, self.decode(tgt_f, tgt_r, posterior.z_task[t])))
        else:
            rows = c.n_train
            idx = np.arange(x.shape[0])
            blocks.append((None, idx, self.decode(feats, r_star, posterior.z_global)))

        return TrainForward(blocks, rows, posterior.dist_set(), prior.dist_set(), posterior)

    def forward_infer(self, ctx_x, ctx_y, ctx_tasks, tgt_x,
                      rng: np.random.Generator) -> InferResult:
        """Context-conditioned priors decode every target under every task head."""
        ctx_x = np.atleast_2d(np.asarray(ctx_x, dtype=np.float64))
        if ctx_x.shape[0] == 0:
            raise NoContextError("inference requires a non-empty context (replay buffer)")
        tgt_x = np.atleast_2d(np.asarray(tgt_x, dtype=np.float64))
        c = self.cfg
        ctx_onehot = one_hot(np.asarray(ctx_y, dtype=np.intp), c.total_classes)
        ctx_feats = self.features(ctx_x)
        tgt_feats = self.features(tgt_x)

        bundle = self.encode_latent(ctx_feats, ctx_onehot, ctx_tasks, c.n_eval, rng)
        r_star, weights = self.encode_deterministic(ctx_feats, ctx_onehot, tgt_feats) \
            if c.variant != "np" else (None, None)
        self.last_cross_attention = weights

        heads = {}
        if c.variant in ("npcl", "st_npcl"):
            rows = c.n_eval * c.m_task if c.variant == "npcl" else c.n_eval
            for t in bundle.present:
                heads[t] = self.decode(tgt_feats, r_star, bundle.z_task[t])
        else:
            rows = c.n_eval
            heads[0] = self.decode(tgt_feats, r_star, bundle.z_global)
        return InferResult(heads, rows, tgt_x.shape[0], weights)


def make_variant(config: ModelConfig, seed: int = 0) -> NPCLModel:
    """Build a model for the configured variant; unknown names fail fast."""
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}, expected one of {VARIANTS}")
    return NPCLModel(config, seed=seed)
