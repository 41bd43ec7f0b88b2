"""
Shared observation encoder, message head, task attention, policy/value heads and EMA target

Parameters are stored as right-multiplied matrices (x @ W). The batched *_batch
functions build differentiable graphs for training; encode, to_message,
task_attention, policy_forward and task_bias are the single-observation API.
"""
import json
import os
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import config
import numcore as nc
from numcore import Tensor
from scalecomm_utils import (DomainError, IncompatibleArtifactError, MissingArtifactError,
                             StructuralError, warn_once)

CHECKPOINT_FORMAT = "scalecomm-checkpoint"
CHECKPOINT_VERSION = 1

# Logit offset for masked task slots inside differentiable graphs
MASK_OFFSET = -1e30

ENCODER_GROUP = ('W1', 'b1', 'W2', 'b2', 'W_m')
SSL_GROUP = ('W_c', 'W_g', 'b_g', 'W_hz')
POLICY_GROUP = ('W_q', 'W_k', 'W_v', 'W_pi', 'b_pi', 'W_val', 'b_val', 'W_B')
GROUPS = {'encoder': ENCODER_GROUP, 'ssl': SSL_GROUP, 'policy': POLICY_GROUP}


@dataclass
class EncoderConfig:
    k_candidates: int = config.K_CANDIDATES
    hidden_dim: int = config.HIDDEN_DIM
    latent_dim: int = config.LATENT_DIM
    message_dim: int = config.MESSAGE_DIM
    attention_dim: int = config.ATTENTION_DIM
    ema_momentum: float = config.EMA_MOMENTUM
    norm_eps: float = config.NORM_EPS

    @property
    def obs_dim(self):
        return config.SELF_FEATURE_DIM + config.TASK_FEATURE_DIM * self.k_candidates

    @property
    def n_actions(self):
        return self.k_candidates + 1

    def shapes(self):
        d, dh, dz = self.obs_dim, self.hidden_dim, self.latent_dim
        dm, da, dt, na = self.message_dim, self.attention_dim, config.TASK_FEATURE_DIM, self.n_actions
        return {
            'W1': (d, dh), 'b1': (dh,), 'W2': (dh, dz), 'b2': (dz,), 'W_m': (dz, dm),
            'W_c': (dz, dm), 'W_g': (dm, dz), 'b_g': (dz,), 'W_hz': (dh, dz),
            'W_q': (dz, da), 'W_k': (dt, da), 'W_v': (dt, dz),
            'W_pi': (2 * dz, na), 'b_pi': (na,), 'W_val': (2 * dz, 1), 'b_val': (1,),
            'W_B': (dz, dt),
        }


class EncoderParams:
    """Named trainable tensors of the whole model, split into encoder/ssl/policy groups"""

    def __init__(self, cfg: EncoderConfig, tensors: Dict[str, Tensor]):
        expected = cfg.shapes()
        if set(tensors) != set(expected):
            raise StructuralError(f"parameter names differ: {sorted(set(tensors) ^ set(expected))}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise StructuralError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: nc.Rng):
        """Fan-in scaled uniform weights, zero biases"""
        tensors = {}
        for name, shape in cfg.shapes().items():
            if len(shape) == 1:
                tensors[name] = nc.zeros(*shape, name=name)
            else:
                tensors[name] = nc.he_uniform(rng.child(name), shape[0], shape[1], name=name)
        return cls(cfg, tensors)

    @classmethod
    def zeros(cls, cfg: EncoderConfig):
        return cls(cfg, {name: nc.zeros(*shape, name=name) for name, shape in cfg.shapes().items()})

    @classmethod
    def from_arrays(cls, cfg: EncoderConfig, arrays: Dict[str, np.ndarray], requires_grad=True):
        for name, shape in cfg.shapes().items():
            if name not in arrays:
                raise IncompatibleArtifactError(f"checkpoint lacks tensor {name}")
            if tuple(arrays[name].shape) != shape:
                raise IncompatibleArtifactError(
                    f"tensor {name} has shape {tuple(arrays[name].shape)}, expected {shape}"
                )
        return cls(cfg, {
            name: Tensor(arrays[name], requires_grad=requires_grad, name=name) for name in cfg.shapes()
        })

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.cfg.shapes())

    def group(self, *groups):
        """Tensors belonging to the named groups, in declaration order"""
        wanted = {name for g in groups for name in GROUPS[g]}
        return [self.tensors[name] for name in self.names() if name in wanted]

    def all(self):
        return [self.tensors[name] for name in self.names()]

    def copy(self, requires_grad=True):
        return EncoderParams(self.cfg, {
            name: Tensor(t.data, requires_grad=requires_grad, name=name) for name, t in self.tensors.items()
        })

    def arrays(self):
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays):
        for name, value in arrays.items():
            self.tensors[name].data[...] = value

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def is_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


class EmaTarget:
    """Momentum copy of EncoderParams; its tensors never require grad"""

    def __init__(self, online: EncoderParams, momentum=config.EMA_MOMENTUM):
        if not 0.0 <= momentum < 1.0:
            raise DomainError(f"EMA momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.params = online.copy(requires_grad=False)

    def update(self, online: EncoderParams):
        mu = self.momentum
        for name in online.names():
            target = self.params[name]
            if mu == 0.0:
                target.data[...] = online[name].data
            else:
                target.data += (1.0 - mu) * (online[name].data - target.data)
        return self


def ema_update(online: EncoderParams, target: EmaTarget):
    """θ_EMA ← μ θ_EMA + (1-μ) θ, elementwise"""
    return target.update(online)


# ----------------------------------------------------------------------------
# Batched graph forward
# ----------------------------------------------------------------------------

def split_obs(obs, k_candidates):
    """(B, 3+5K) observation rows -> self features (B, 3) and task rows (B, K, 5)"""
    obs = np.asarray(obs, dtype=np.float64)
    self_features = obs[:, :config.SELF_FEATURE_DIM]
    tasks = obs[:, config.SELF_FEATURE_DIM:].reshape(obs.shape[0], k_candidates, config.TASK_FEATURE_DIM)
    return self_features, tasks


def encode_batch(params: EncoderParams, obs):
    """Returns (z (B, d_z), hidden (B, d_h))"""
    obs = nc.as_tensor(obs)
    if obs.ndim != 2 or obs.shape[1] != params.cfg.obs_dim:
        raise StructuralError(f"observation batch {obs.shape} does not match d={params.cfg.obs_dim}")
    hidden = nc.relu(obs @ params['W1'] + params['b1'])
    return hidden @ params['W2'] + params['b2'], hidden


def _guarded_normalize(x: Tensor, eps):
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    hits = int(np.sum(norms < eps))
    if hits:
        warn_once('norm_guard', f"{hits} vectors fell below the normalization floor {eps}")
    return nc.l2_normalize(x, eps=eps)


def message_batch(params: EncoderParams, z):
    """Unit-norm messages (B, d_m) with the ε-guard used in training loops"""
    return _guarded_normalize(z @ params['W_m'], params.cfg.norm_eps)


def comparator_batch(params: EncoderParams, z):
    """Shared comparator projection of latents into the message space, unit norm"""
    return _guarded_normalize(z @ params['W_c'], params.cfg.norm_eps)


def predictor_batch(params: EncoderParams, m):
    """CPC predictor g: messages (B, d_m) -> predicted future latents (B, d_z)"""
    return m @ params['W_g'] + params['b_g']


def attention_batch(params: EncoderParams, z, tasks, mask):
    """
    Query-conditioned attention over candidate rows

    Args:
        z: Latents (B, d_z)
        tasks: Candidate features (B, K, 5)
        mask: Boolean (B, K); rows with no open slot get zero weights and zero context

    Returns:
        (alpha (B, K), context (B, d_z))
    """
    tasks = nc.as_tensor(tasks)
    mask = np.asarray(mask, dtype=bool)
    batch, k = mask.shape
    query = nc.reshape(z @ params['W_q'], (batch, 1, params.cfg.attention_dim))
    scores = nc.tsum((tasks @ params['W_k']) * query, axis=-1)
    scores = scores + np.where(mask, 0.0, MASK_OFFSET)
    alpha = nc.softmax(scores, axis=-1) * mask.any(axis=1, keepdims=True).astype(np.float64)
    values = tasks @ params['W_v']
    context = nc.tsum(nc.reshape(alpha, (batch, k, 1)) * values, axis=1)
    return alpha, context


def task_bias_batch(params: EncoderParams, z, tasks, beta):
    """Bilinear task score β zᵀ W_B τ_k, shape (B, K)"""
    tasks = nc.as_tensor(tasks)
    projected = nc.reshape(z @ params['W_B'], (z.shape[0], 1, config.TASK_FEATURE_DIM))
    return nc.tsum(tasks * projected, axis=-1) * beta


def _unit_rows(x, eps):
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norms, eps)


@dataclass
class ProtoAffinity:
    """
    Prototype-affinity logit bias

    Candidate k scores β Σ_p q_p(m) q_p(m_k), where q are soft prototype codes,
    m is the agent's message and m_k is the candidate's value projection W_v τ_k
    passed through the message head. The scores carry no gradient.
    """
    prototypes: np.ndarray
    beta: float = config.PROTO_AFFINITY_BETA
    temperature: float = config.TEMPERATURE

    def validate(self, params: EncoderParams):
        prototypes = np.asarray(self.prototypes)
        if prototypes.ndim != 2 or prototypes.shape[0] < 2:
            raise StructuralError("proto affinity needs a (P >= 2, d_m) prototype matrix")
        if prototypes.shape[1] != params.cfg.message_dim:
            raise StructuralError(f"prototype width {prototypes.shape[1]} != d_m={params.cfg.message_dim}")
        if self.beta < 0 or self.temperature <= 0:
            raise DomainError("proto affinity needs beta >= 0 and a positive temperature")
        return self

    def scores(self, params: EncoderParams, z, tasks):
        """β-scaled affinities, ndarray (B, K)"""
        self.validate(params)
        eps = params.cfg.norm_eps
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        tasks = np.asarray(tasks.data if isinstance(tasks, Tensor) else tasks, dtype=np.float64)
        prototypes = _unit_rows(np.asarray(self.prototypes, dtype=np.float64), eps)
        w_m = params['W_m'].data
        own = _unit_rows(z @ w_m, eps)
        candidates = _unit_rows(tasks @ params['W_v'].data @ w_m, eps)
        with nc.no_grad():
            q = nc.softmax(Tensor(own @ prototypes.T), temperature=self.temperature).data
            q_k = nc.softmax(Tensor(candidates @ prototypes.T), temperature=self.temperature).data
        return self.beta * np.einsum('bp,bkp->bk', q, q_k)


def policy_batch(params: EncoderParams, z, context, mask, bias=None):
    """
    Policy logits and values from h = [z; c]

    Masked task slots carry MASK_OFFSET so they have zero probability. The skip
    logit is never masked or biased.

    Returns:
        (logits (B, K+1), value (B,))
    """
    mask = np.asarray(mask, dtype=bool)
    h = nc.concat([z, context], axis=-1)
    logits = h @ params['W_pi'] + params['b_pi']
    if bias is not None:
        logits = logits + nc.concat([bias, np.zeros((mask.shape[0], 1))], axis=-1)
    penalty = np.concatenate([np.where(mask, 0.0, MASK_OFFSET), np.zeros((mask.shape[0], 1))], axis=1)
    logits = logits + penalty
    value = nc.reshape(h @ params['W_val'] + params['b_val'], (mask.shape[0],))
    return logits, value


def act_forward(params: EncoderParams, obs, mask, bias_beta=None, affinity: Optional[ProtoAffinity] = None):
    """
    Full observation -> (logits, value, z) pass used by rollouts and PPO updates

    Args:
        obs: (B, 3+5K) observation rows
        mask: (B, K) candidate mask
        bias_beta: Task-bias scale, or None to disable the scorer
        affinity: Optional prototype-affinity bias added on top of the task bias
    """
    _, tasks = split_obs(obs, params.cfg.k_candidates)
    z, _ = encode_batch(params, obs)
    _, context = attention_batch(params, z, tasks, mask)
    bias = task_bias_batch(params, z, tasks, bias_beta) if bias_beta else None
    if affinity is not None and affinity.beta:
        extra = Tensor(affinity.scores(params, z, tasks))
        bias = extra if bias is None else bias + extra
    logits, value = policy_batch(params, z, context, mask, bias)
    return logits, value, z


# ----------------------------------------------------------------------------
# Single-observation API
# ----------------------------------------------------------------------------

def _obs_vector(obs):
    if hasattr(obs, 'vector'):
        return obs.vector()
    return np.asarray(obs.data if isinstance(obs, Tensor) else obs, dtype=np.float64)


def encode(obs, params: EncoderParams):
    """z = f_θ(o) for a single observation (Observation or 1-D array)"""
    vector = _obs_vector(obs)
    if vector.ndim != 1 or vector.shape[0] != params.cfg.obs_dim:
        raise StructuralError(f"observation of shape {vector.shape} does not match d={params.cfg.obs_dim}")
    z, _ = encode_batch(params, vector.reshape(1, -1))
    return nc.reshape(z, (params.cfg.latent_dim,))


def to_message(z, params: EncoderParams):
    """Unit-norm message m = W_m z / ‖W_m z‖; raises DomainError on a zero vector"""
    z = nc.as_tensor(z)
    raw = nc.reshape(nc.reshape(z, (1, -1)) @ params['W_m'], (params.cfg.message_dim,))
    return nc.l2_normalize(raw)


def task_attention(z, tasks, mask, params: EncoderParams):
    """
    Attention weights over K candidates and the resulting context vector

    Returns:
        (alpha Tensor[K], context Tensor[d_z]); masked weights are exactly zero
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise DomainError("task_attention needs at least one unmasked candidate")
    z = nc.reshape(nc.as_tensor(z), (1, -1))
    tasks = np.asarray(tasks, dtype=np.float64).reshape(1, mask.shape[0], config.TASK_FEATURE_DIM)
    alpha, context = attention_batch(params, z, tasks, mask.reshape(1, -1))
    return nc.reshape(alpha, (mask.shape[0],)), nc.reshape(context, (params.cfg.latent_dim,))


def task_bias(z, tasks, params: EncoderParams, beta=config.TASK_BIAS_BETA):
    """Per-candidate logit bias β zᵀ W_B τ_k, Tensor[K]"""
    tasks = np.asarray(tasks, dtype=np.float64)
    z = nc.reshape(nc.as_tensor(z), (1, -1))
    bias = task_bias_batch(params, z, tasks.reshape(1, *tasks.shape), beta)
    return nc.reshape(bias, (tasks.shape[0],))


def policy_forward(z, c, params: EncoderParams, mask=None, bias=None):
    """
    Logits over actions 1..K+1 and the state value

    Returns:
        (logits ndarray[K+1] with -inf on masked task slots, value float)
    """
    k = params.cfg.k_candidates
    mask = np.ones(k, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    z = nc.reshape(nc.as_tensor(z), (1, -1))
    c = nc.reshape(nc.as_tensor(c), (1, -1))
    if bias is not None:
        bias = nc.reshape(nc.as_tensor(bias), (1, k))
    with nc.no_grad():
        logits, value = policy_batch(params, z, c, mask.reshape(1, -1), bias)
    out = logits.data.reshape(-1).copy()
    out[:k][~mask] = -np.inf
    return out, float(value.data[0])


def action_probs(logits):
    """Softmax over a logit vector that may contain -inf entries"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def sample_action(logits, rng: nc.Rng):
    """1-based action drawn from softmax(logits)"""
    return rng.choice(len(logits), p=action_probs(logits)) + 1


def greedy_action(logits):
    """1-based argmax action (lowest index on ties)"""
    return int(np.argmax(logits)) + 1


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None):
    """
    Write named arrays as a versioned JSON checkpoint

    Identical tensors and meta always produce identical bytes.
    """
    blob = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'meta': meta or {},
        'tensors': {
            name: {'shape': list(np.shape(value)), 'values': [float(v) for v in np.ravel(value)]}
            for name, value in tensors.items()
        },
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(blob, f, sort_keys=True)
    return path


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        (dict of name -> ndarray, meta dict)
    """
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        blob = json.load(f)
    if blob.get('format') != CHECKPOINT_FORMAT or blob.get('version') != CHECKPOINT_VERSION:
        raise IncompatibleArtifactError(
            f"{path} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file"
        )
    tensors = {}
    for name, entry in blob['tensors'].items():
        values = np.asarray(entry['values'], dtype=np.float64)
        shape = tuple(entry['shape'])
        if values.size != int(np.prod(shape)):
            raise IncompatibleArtifactError(f"tensor {name} header {shape} disagrees with its data")
        tensors[name] = values.reshape(shape)
    return tensors, blob.get('meta', {})


def model_arrays(online: EncoderParams, ema: Optional[EmaTarget] = None, prototypes=None):
    """Flatten model state into checkpoint names: online/<p>, ema/<p>, prototypes"""
    arrays = {f"online/{name}": value for name, value in online.arrays().items()}
    if ema is not None:
        arrays.update({f"ema/{name}": value for name, value in ema.params.arrays().items()})
    if prototypes is not None:
        arrays['prototypes'] = np.asarray(prototypes)
    return arrays


def restore_model(cfg: EncoderConfig, arrays: Dict[str, np.ndarray]):
    """
    Rebuild (online, ema, prototypes) from checkpoint arrays

    Raises IncompatibleArtifactError when any tensor disagrees with cfg.
    """
    online = EncoderParams.from_arrays(
        cfg, {name[len('online/'):]: v for name, v in arrays.items() if name.startswith('online/')}
    )
    ema = None
    ema_arrays = {name[len('ema/'):]: v for name, v in arrays.items() if name.startswith('ema/')}
    if ema_arrays:
        ema = EmaTarget(online, cfg.ema_momentum)
        ema.params = EncoderParams.from_arrays(cfg, ema_arrays, requires_grad=False)
    prototypes = arrays.get('prototypes')
    if prototypes is not None and (prototypes.ndim != 2 or prototypes.shape[1] != cfg.message_dim):
        raise IncompatibleArtifactError(
            f"prototypes have shape {prototypes.shape}, expected (P, {cfg.message_dim})"
        )
    return online, ema, prototypes
