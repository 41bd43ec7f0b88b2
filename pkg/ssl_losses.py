"""
Self-supervised objectives over agent messages and latents

Contrastive terms compare unit vectors by cosine similarity. Latents live in
d_z while messages live in d_m, so cross-agent and KNN terms first project
latents through the shared comparator W_c. The CPC term compares predictor
outputs g(m) with future latents directly in d_z.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

import config
import numcore as nc
from encoder import (EmaTarget, EncoderParams, comparator_batch, encode_batch,
                     message_batch, predictor_batch)
from numcore import Tensor
from scalecomm_utils import ConfigError, DomainError, StructuralError, warn_once
from trajectory_buffer import TrajectoryBuffer
from warehouse_env import Observation

BREAKDOWN_KEYS = ['L_X', 'L_KNN', 'L_CPC', 'L_Proto', 'L_pred', 'L_ts', 'L_hz', 'L_CKA', 'total']

ABLATIONS = ('no_contrast', 'no_proto', 'no_curriculum')


@dataclass
class AugmentationConfig:
    mask_prob: float = config.AUG_MASK_PROB
    jitter_std: float = config.AUG_JITTER_STD
    dropout: float = config.AUG_DROPOUT

    def validate(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError("dropout must lie in [0, 1]")
        if self.jitter_std < 0:
            raise ConfigError("jitter_std must be non-negative")

    def weaker(self):
        """EMA-branch augmentation: half the masking, same jitter, no dropout"""
        return AugmentationConfig(self.mask_prob / 2.0, self.jitter_std, 0.0)


@dataclass
class SslWeights:
    alpha: float = config.SSL_ALPHA
    beta: float = config.SSL_BETA
    gamma_cpc: float = config.SSL_GAMMA_CPC
    delta: float = config.SSL_DELTA
    eta: float = config.SSL_ETA
    lambdas: Tuple[float, float, float, float] = config.INV_LAMBDAS
    temperature: float = config.TEMPERATURE
    horizon: int = config.CPC_HORIZON
    view: float = config.SSL_VIEW_WEIGHT

    def validate(self):
        for name in ('alpha', 'beta', 'gamma_cpc', 'delta', 'eta', 'view'):
            if getattr(self, name) < 0:
                raise ConfigError(f"ssl weight {name} must be non-negative")
        if len(self.lambdas) != 4 or any(l < 0 for l in self.lambdas):
            raise ConfigError("lambdas must be four non-negative numbers")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.horizon < 1:
            raise ConfigError("horizon must be a positive integer")

    def ablated(self, ablations: Sequence[str] = ()):
        """Copy with the weights of ablated terms forced to zero"""
        unknown = set(ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s): {sorted(unknown)}")
        out = SslWeights(**{**self.__dict__})
        if 'no_contrast' in ablations:
            out.alpha = 0.0
        if 'no_proto' in ablations:
            out.delta = 0.0
        return out


class MemoryQueue:
    """Fixed-capacity FIFO of gradient-free embeddings"""

    def __init__(self, capacity, dim):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((capacity, dim))
        self.head = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, embeddings):
        if isinstance(embeddings, Tensor):
            if embeddings.requires_grad:
                raise StructuralError("memory queue only accepts detached embeddings")
            embeddings = embeddings.data
        rows = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.dim)
        for row in rows:
            self.entries[self.head] = row
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        return self

    def contents(self):
        """Stored rows, oldest first"""
        if self.size < self.capacity:
            return self.entries[:self.size].copy()
        return np.concatenate([self.entries[self.head:], self.entries[:self.head]])

    def state(self):
        return self.entries.copy(), self.head, self.size

    def load_state(self, state):
        entries, self.head, self.size = state
        self.entries = entries.copy()
        return self


def queue_push(queue: MemoryQueue, embeddings):
    """Append rows in order, evicting the oldest past capacity"""
    return queue.push(embeddings)


class PrototypeBank:
    """P learnable unit-norm prototype vectors in message space"""

    def __init__(self, count, dim, rng: Optional[nc.Rng] = None, values=None):
        if count < 2:
            raise ConfigError("need at least two prototypes")
        if values is None:
            values = (rng or nc.Rng(0)).normal(size=(count, dim))
        self.prototypes = Tensor(values, requires_grad=True, name='prototypes')
        if self.prototypes.shape != (count, dim):
            raise StructuralError(f"prototype values have shape {self.prototypes.shape}")
        self.renormalize()

    @property
    def count(self):
        return self.prototypes.shape[0]

    def renormalize(self):
        norms = np.linalg.norm(self.prototypes.data, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DomainError("prototype collapsed to zero")
        self.prototypes.data /= norms


@dataclass
class SslBatch:
    """
    G timestep groups x N agents (row g*N + a), with successor rows

    next_* hold t+1 rows and future_* hold t+k rows of the same agent and
    episode; *_valid marks rows whose successor exists.
    """
    obs: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    n_agents: int
    next_obs: np.ndarray
    next_valid: np.ndarray
    future_obs: np.ndarray
    future_valid: np.ndarray

    @property
    def size(self):
        return self.obs.shape[0]

    def peer_index(self):
        """Row of the co-observing peer (agent a+1 mod N, same group) for every row"""
        rows = np.arange(self.size)
        group, agent = rows // self.n_agents, rows % self.n_agents
        return group * self.n_agents + (agent + 1) % self.n_agents


def build_ssl_batch(buffer: TrajectoryBuffer, group_keys, horizon):
    """
    Assemble an SslBatch from (episode, t) groups of a buffer

    Args:
        buffer: Source TrajectoryBuffer
        group_keys: Sequence of (episode, t) keys holding all N agents
        horizon: CPC horizon k
    """
    arrays = buffer.arrays()
    n_agents = buffer.n_agents
    rows, next_rows, future_rows = [], [], []
    for episode, t in group_keys:
        for agent in range(n_agents):
            rows.append(buffer.position(episode, t, agent))
            next_rows.append(buffer.position(episode, t + 1, agent))
            future_rows.append(buffer.position(episode, t + horizon, agent))
    rows = np.asarray(rows, dtype=np.int64)
    next_valid = np.array([r is not None for r in next_rows])
    future_valid = np.array([r is not None for r in future_rows])
    next_idx = np.array([r if r is not None else 0 for r in next_rows], dtype=np.int64)
    future_idx = np.array([r if r is not None else 0 for r in future_rows], dtype=np.int64)
    return SslBatch(
        obs=arrays['obs'][rows],
        mask=arrays['mask'][rows],
        labels=arrays['label'][rows],
        n_agents=n_agents,
        next_obs=arrays['obs'][next_idx],
        next_valid=next_valid,
        future_obs=arrays['obs'][future_idx],
        future_valid=future_valid,
    )


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------

def augment_batch(obs, mask, aug: AugmentationConfig, rng: nc.Rng, k_candidates):
    """
    Mask candidate rows, jitter task features and drop self features

    Returns:
        (augmented obs (B, d), augmented mask (B, K))
    """
    obs = np.array(obs, dtype=np.float64)
    mask = np.array(mask, dtype=bool)
    batch = obs.shape[0]
    self_features = obs[:, :config.SELF_FEATURE_DIM]
    tasks = obs[:, config.SELF_FEATURE_DIM:].reshape(batch, k_candidates, config.TASK_FEATURE_DIM)

    dropped = rng.random((batch, k_candidates)) < aug.mask_prob
    tasks[dropped] = 0.0
    mask &= ~dropped

    jitter = rng.normal(0.0, aug.jitter_std, size=tasks.shape) if aug.jitter_std > 0 else 0.0
    tasks += jitter * mask[:, :, None]

    keep = rng.random(self_features.shape) >= aug.dropout
    scale = 1.0 / (1.0 - aug.dropout) if aug.dropout < 1.0 else 0.0
    self_features = self_features * keep * scale

    return np.concatenate([self_features, tasks.reshape(batch, -1)], axis=1), mask


def augment(obs, aug: AugmentationConfig, rng: nc.Rng):
    """Augmented copy of a single warehouse Observation"""
    k = obs.mask.shape[0]
    vector, mask = augment_batch(obs.vector().reshape(1, -1), obs.mask.reshape(1, -1), aug, rng, k)
    return Observation(
        self_features=vector[0, :config.SELF_FEATURE_DIM],
        candidates=vector[0, config.SELF_FEATURE_DIM:].reshape(k, config.TASK_FEATURE_DIM),
        mask=mask[0],
        candidate_ids=[cid if keep else -1 for cid, keep in zip(obs.candidate_ids, mask[0])],
        label=obs.label,
    )


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------

def _row_cosine(a, b, eps=0.0):
    return nc.tsum(nc.l2_normalize(a, eps=eps) * nc.l2_normalize(b, eps=eps), axis=-1)


def _positive_first_nce(logits: Tensor):
    return nc.mean(-nc.pick(nc.log_softmax(logits, axis=-1), np.zeros(logits.shape[0], dtype=np.int64)))


def loss_x_contrast(messages, peer_latents, tau, eps=0.0):
    """
    Cross-agent InfoNCE: row i of peer_latents is the positive for message i,
    every peer row sits in the denominator
    """
    messages, peer_latents = nc.as_tensor(messages), nc.as_tensor(peer_latents)
    batch = messages.shape[0]
    if batch < 2:
        raise DomainError("cross-agent contrast needs at least two rows")
    if peer_latents.shape[0] != batch:
        raise StructuralError("one peer row per message required")
    logits = nc.cosine_sim_matrix(messages, peer_latents, eps=eps) * (1.0 / tau)
    return nc.mean(-nc.pick(nc.log_softmax(logits, axis=-1), np.arange(batch)))


def loss_knn(messages, ema_positives, negatives, tau, eps=0.0):
    """
    InfoNCE against a detached EMA positive and detached queue negatives

    Returns a zero constant (and bumps the 'empty_queue' counter) when there are
    no negatives.
    """
    messages = nc.as_tensor(messages)
    negatives = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives, dtype=np.float64)
    if negatives.size == 0:
        warn_once('empty_queue', "memory queue is empty; KNN term skipped")
        return Tensor(0.0)
    positives = nc.as_tensor(ema_positives).detach()
    pos = nc.reshape(_row_cosine(messages, positives, eps), (messages.shape[0], 1))
    neg = nc.cosine_sim_matrix(messages, Tensor(negatives), eps=eps)
    return _positive_first_nce(nc.concat([pos, neg], axis=-1) * (1.0 / tau))


def loss_cpc(predictions, future_latents, negatives, tau, eps=0.0):
    """
    Temporal InfoNCE between g(m^t) and the detached future latent z^{t+k}

    Args:
        predictions: Predictor outputs for rows with a valid t+k successor (B, d_z)
        future_latents: EMA latents of those successors (B, d_z)
        negatives: Queue latents (Q, d_z)
    """
    predictions = nc.as_tensor(predictions)
    if predictions.shape[0] == 0:
        warn_once('no_cpc_pairs', "batch has no (t, t+k) pairs; CPC term skipped")
        return Tensor(0.0)
    return loss_knn(predictions, future_latents, negatives, tau, eps)


def proto_assign(messages, prototypes, tau):
    """
    Detached soft codes q = softmax_p(sim(m, p)/τ)

    Args:
        messages: Target-branch messages (B, d_m) or a single message (d_m,)
        prototypes: (P, d_m)

    Returns:
        ndarray of shape (B, P) (or (P,) for a single message)
    """
    m = np.asarray(messages.data if isinstance(messages, Tensor) else messages, dtype=np.float64)
    p = np.asarray(prototypes.data if isinstance(prototypes, Tensor) else prototypes, dtype=np.float64)
    if p.shape[0] < 2:
        raise DomainError("need at least two prototypes")
    single = m.ndim == 1
    m = m.reshape(-1, p.shape[1])
    with nc.no_grad():
        q = nc.softmax(nc.cosine_sim_matrix(Tensor(m), Tensor(p)), temperature=tau).data
    return q[0] if single else q


def loss_proto(messages, bank: PrototypeBank, tau, codes=None, eps=0.0):
    """
    Cross-entropy between detached codes and online prototype scores

    Codes default to proto_assign of the detached messages.
    """
    messages = nc.as_tensor(messages)
    if codes is None:
        codes = proto_assign(messages, bank.prototypes, tau)
    scores = nc.cosine_sim_matrix(messages, bank.prototypes, eps=eps) * (1.0 / tau)
    return nc.mean(-nc.tsum(nc.log_softmax(scores, axis=-1) * np.asarray(codes), axis=-1))


def cka_loss_term(x: Tensor, y: Tensor):
    """1 - linear CKA(x, y) with Gram-matrix HSIC; y is treated as a constant"""
    y = nc.as_tensor(y).detach()
    xc = x - nc.mean(x, axis=0, keepdims=True)
    yc = y - nc.mean(y, axis=0, keepdims=True)
    gram_x = xc @ nc.transpose(xc)
    gram_y = yc @ nc.transpose(yc)
    hsic_xy = nc.tsum(gram_x * gram_y)
    hsic_xx = nc.tsum(gram_x * gram_x)
    hsic_yy = float(np.sum(gram_y.data * gram_y.data))
    if hsic_xx.item() <= 0 or hsic_yy <= 0:
        warn_once('cka_zero_variance', "constant latents in batch; CKA term skipped")
        return Tensor(0.0)
    return 1.0 - hsic_xy / (nc.sqrt(hsic_xx) * np.sqrt(hsic_yy))


def loss_view_invariance(messages, view_messages, eps=0.0):
    """Mean (1 - cosine) between online messages and detached messages of the other augmented view"""
    messages = nc.as_tensor(messages)
    view_messages = nc.as_tensor(view_messages).detach()
    if messages.shape != view_messages.shape:
        raise StructuralError("both views need the same message shape")
    return nc.mean(1.0 - _row_cosine(messages, view_messages, eps))


def loss_invariance(z, z_ema, hidden, z_pairs, params: EncoderParams, lambdas, eps=config.NORM_EPS):
    """
    Weighted sum of the four consistency terms

    Args:
        z: Online latents (B, d_z)
        z_ema: Detached EMA latents of the same samples (B, d_z)
        hidden: Online hidden activations (B, d_h)
        z_pairs: (z_t, z_t1) online latents of consecutive frames, or None
        params: Online parameters (W_hz projects hidden into d_z)
        lambdas: (λ_pred, λ_ts, λ_hz, λ_cka)

    Returns:
        (total Tensor, dict with L_pred, L_ts, L_hz, L_CKA as floats)
    """
    lam_pred, lam_ts, lam_hz, lam_cka = lambdas
    z_ema = nc.as_tensor(z_ema).detach()
    terms = {}
    total = Tensor(0.0)

    if lam_pred:
        diff = z - z_ema
        terms['L_pred'] = nc.mean(nc.tsum(diff * diff, axis=-1))
    if lam_ts:
        if z_pairs is None or z_pairs[0].shape[0] == 0:
            warn_once('no_temporal_pairs', "batch has no consecutive frames; L_ts skipped")
            terms['L_ts'] = Tensor(0.0)
        else:
            terms['L_ts'] = nc.mean(1.0 - _row_cosine(z_pairs[0], z_pairs[1], eps))
    if lam_hz:
        terms['L_hz'] = nc.mean(1.0 - _row_cosine(hidden @ params['W_hz'], z, eps))
    if lam_cka:
        terms['L_CKA'] = cka_loss_term(z, z_ema)

    for key, weight in zip(('L_pred', 'L_ts', 'L_hz', 'L_CKA'), lambdas):
        if key in terms:
            total = total + terms[key] * weight
    return total, {key: terms[key].item() if key in terms else 0.0 for key in ('L_pred', 'L_ts', 'L_hz', 'L_CKA')}


def _temporal_pairs(params: EncoderParams, batch: SslBatch):
    idx = np.flatnonzero(batch.next_valid)
    if idx.size == 0:
        return None
    z_now, _ = encode_batch(params, batch.obs[idx])
    z_next, _ = encode_batch(params, batch.next_obs[idx])
    return z_now, z_next


def _cpc_inputs(params: EncoderParams, target: EmaTarget, m: Tensor, batch: SslBatch):
    idx = np.flatnonzero(batch.future_valid)
    if idx.size == 0:
        empty = Tensor(np.zeros((0, params.cfg.latent_dim)))
        return empty, empty
    predictions = predictor_batch(params, nc.take_rows(m, idx))
    with nc.no_grad():
        future, _ = encode_batch(target.params, batch.future_obs[idx])
    return predictions, future


def total_ssl_loss(batch: SslBatch, params: EncoderParams, target: EmaTarget, queue: MemoryQueue,
                   bank: PrototypeBank, weights: SslWeights, rng: nc.Rng,
                   aug: Optional[AugmentationConfig] = None, ablations: Sequence[str] = ()):
    """
    Weighted self-supervised objective for one batch

    Terms whose weight is zero (directly or through an ablation) are not
    computed and report exactly 0 in the breakdown. L_pred and L_CKA compare
    online and EMA latents of the online view; the queue and the prototype codes
    use the weaker EMA view.

    Returns:
        (total Tensor, breakdown dict keyed by BREAKDOWN_KEYS plus 'L_view',
        detached EMA latents ndarray)
    """
    weights = weights.ablated(ablations)
    aug = aug or AugmentationConfig()
    k = params.cfg.k_candidates
    eps = params.cfg.norm_eps
    tau = weights.temperature

    online_obs, _ = augment_batch(batch.obs, batch.mask, aug, rng.child('online'), k)
    ema_obs, _ = augment_batch(batch.obs, batch.mask, aug.weaker(), rng.child('ema'), k)

    z, hidden = encode_batch(params, online_obs)
    m = message_batch(params, z)
    with nc.no_grad():
        z_ema, _ = encode_batch(target.params, ema_obs)
        m_ema = message_batch(target.params, z_ema)
        keys_ema = comparator_batch(target.params, z_ema)

    queued = queue.contents()
    terms = {}
    if weights.alpha:
        peer_keys = nc.take_rows(comparator_batch(params, z), batch.peer_index())
        terms['L_X'] = (loss_x_contrast(m, peer_keys, tau, eps), weights.alpha)
    if weights.beta:
        with nc.no_grad():
            negatives = comparator_batch(target.params, Tensor(queued)).data if len(queued) else queued
        terms['L_KNN'] = (loss_knn(m, keys_ema, negatives, tau, eps), weights.beta)
    if weights.gamma_cpc:
        predictions, future = _cpc_inputs(params, target, m, batch)
        terms['L_CPC'] = (loss_cpc(predictions, future, queued, tau, eps), weights.gamma_cpc)
    if weights.delta:
        codes = proto_assign(m_ema, bank.prototypes, tau)
        terms['L_Proto'] = (loss_proto(m, bank, tau, codes=codes, eps=eps), weights.delta)

    total = Tensor(0.0)
    for value, weight in terms.values():
        total = total + value * weight
    breakdown = {key: terms[key][0].item() if key in terms else 0.0 for key in ('L_X', 'L_KNN', 'L_CPC', 'L_Proto')}

    invariance_terms = {'L_pred': 0.0, 'L_ts': 0.0, 'L_hz': 0.0, 'L_CKA': 0.0}
    if weights.eta and any(weights.lambdas):
        pairs = _temporal_pairs(params, batch) if weights.lambdas[1] else None
        if weights.lambdas[0] or weights.lambdas[3]:
            with nc.no_grad():
                z_same, _ = encode_batch(target.params, online_obs)
        else:
            z_same = z_ema
        inv, invariance_terms = loss_invariance(z, z_same, hidden, pairs, params, weights.lambdas, eps)
        total = total + inv * weights.eta
    breakdown.update(invariance_terms)

    breakdown['L_view'] = 0.0
    if weights.view:
        view = loss_view_invariance(m, m_ema, eps)
        breakdown['L_view'] = view.item()
        total = total + view * weights.view
    breakdown['total'] = total.item()
    return total, breakdown, z_ema.data


def auxiliary_temporal_loss(batch: SslBatch, params: EncoderParams, target: EmaTarget,
                            queue: MemoryQueue, weights: SslWeights):
    """
    γ_cpc·L_CPC + λ_ts·L_ts on un-augmented rollout rows (fine-tuning auxiliary term)

    Returns:
        (total Tensor, {'L_CPC', 'L_ts'} floats, detached EMA latents ndarray)
    """
    eps = params.cfg.norm_eps
    z, _ = encode_batch(params, batch.obs)
    m = message_batch(params, z)
    with nc.no_grad():
        z_ema, _ = encode_batch(target.params, batch.obs)
    predictions, future = _cpc_inputs(params, target, m, batch)
    cpc = loss_cpc(predictions, future, queue.contents(), weights.temperature, eps)
    pairs = _temporal_pairs(params, batch)
    if pairs is None:
        warn_once('no_temporal_pairs', "batch has no consecutive frames; L_ts skipped")
        ts = Tensor(0.0)
    else:
        ts = nc.mean(1.0 - _row_cosine(pairs[0], pairs[1], eps))
    total = cpc * weights.gamma_cpc + ts * weights.lambdas[1]
    return total, {'L_CPC': cpc.item(), 'L_ts': ts.item()}, z_ema.data


def ssl_cost_model(batch, queue, prototypes, dim):
    """
    Multiply-add counts of the similarity terms

    Returns:
        Dict with 'pairwise' (B²d), 'queue' (BQd), 'prototype' (BPd) and 'total'
    """
    costs = {
        'pairwise': batch * batch * dim,
        'queue': batch * queue * dim,
        'prototype': batch * prototypes * dim,
    }
    costs['total'] = sum(costs.values())
    return costs
