"""
Two-phase training: self-supervised pretraining on heuristic data, then PPO fine-tuning

Phase II keeps the EMA target and memory queue running and adds a
curriculum-weighted temporal auxiliary loss to the PPO objective.
"""
import json
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

import config
import numcore as nc
import warehouse_env as wenv
from encoder import EmaTarget, EncoderConfig, EncoderParams, ProtoAffinity, act_forward, action_probs
from scalecomm_utils import (WARNING_COUNTERS, ConfigError, DomainError, NumericalAbort,
                             StructuralError, chunk, log, warn_once)
from ssl_losses import (BREAKDOWN_KEYS, AugmentationConfig, MemoryQueue, PrototypeBank, SslWeights,
                        auxiliary_temporal_loss, build_ssl_batch, total_ssl_loss)
from trajectory_buffer import TrajectoryBuffer, TrajectoryRecord

ITERATION_KEYS = [
    'iteration', 'env_steps', 'lambda', 'mean_return', 'deliveries_per_ep', 'unassigned_pct',
    'episodes', 'policy_loss', 'value_loss', 'entropy', 'clip_fraction', 'L_PPO', 'L_aux', 'total',
]

EPOCH_KEYS = BREAKDOWN_KEYS + ['L_view']


@dataclass
class CurriculumSchedule:
    lambda_min: float = config.CURRICULUM_LAMBDA_MIN
    lambda_max: float = config.CURRICULUM_LAMBDA_MAX
    ramp_steps: int = 1
    shape: str = "linear"

    def validate(self):
        if self.lambda_min < 0 or self.lambda_max < self.lambda_min:
            raise ConfigError("curriculum needs 0 <= lambda_min <= lambda_max")
        if self.ramp_steps < 1:
            raise ConfigError("ramp_steps must be positive")
        if self.shape != "linear":
            raise ConfigError(f"unsupported curriculum shape '{self.shape}'")


def curriculum_lambda(t, schedule: CurriculumSchedule):
    """Linear ramp from lambda_min at t=0 to lambda_max at t=ramp_steps, constant after"""
    if t < 0:
        raise DomainError("curriculum step must be non-negative")
    progress = min(1.0, t / schedule.ramp_steps)
    return schedule.lambda_min + (schedule.lambda_max - schedule.lambda_min) * progress


@dataclass
class PpoConfig:
    clip: float = config.PPO_CLIP
    gamma: float = config.PPO_GAMMA
    gae_lambda: float = config.PPO_GAE_LAMBDA
    epochs: int = config.PPO_EPOCHS
    steps_per_iter: int = config.PPO_STEPS_PER_ITER
    minibatch: int = config.PPO_MINIBATCH
    entropy_coef: float = config.PPO_ENTROPY_COEF
    value_coef: float = config.PPO_VALUE_COEF
    lr: float = config.PPO_LR
    aux_batch: int = config.PPO_AUX_BATCH
    bias_enabled: bool = config.TASK_BIAS_ENABLED
    bias_beta: float = config.TASK_BIAS_BETA
    affinity_beta: float = config.PROTO_AFFINITY_BETA
    encoder_mode: str = config.ENCODER_MODE

    def validate(self):
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if self.epochs < 1 or self.steps_per_iter < 1 or self.minibatch < 1 or self.aux_batch < 1:
            raise ConfigError("epochs, steps_per_iter, minibatch and aux_batch must be >= 1")
        if self.encoder_mode not in ("frozen", "finetune"):
            raise ConfigError(f"encoder_mode must be 'frozen' or 'finetune', got '{self.encoder_mode}'")
        if self.affinity_beta < 0:
            raise ConfigError("affinity_beta must be non-negative")

    @property
    def beta(self):
        return self.bias_beta if self.bias_enabled else None


@dataclass
class TrainReport:
    ssl_steps: List[dict] = field(default_factory=list)
    ssl_epochs: List[dict] = field(default_factory=list)
    ppo_iterations: List[dict] = field(default_factory=list)
    optimizer_steps: int = 0
    env_steps: int = 0
    nan_aborts: List[int] = field(default_factory=list)
    warnings: Dict[str, int] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing=False):
        out = {
            'ssl_epochs': self.ssl_epochs,
            'ppo_iterations': self.ppo_iterations,
            'optimizer_steps': self.optimizer_steps,
            'env_steps': self.env_steps,
            'nan_aborts': self.nan_aborts,
            'warnings': dict(sorted(self.warnings.items())),
        }
        if include_timing:
            out['timing'] = self.timing
        return out


# ----------------------------------------------------------------------------
# Phase I
# ----------------------------------------------------------------------------

def pretrain_ssl(buffer: TrajectoryBuffer, params: EncoderParams, target: EmaTarget, queue: MemoryQueue,
                 bank: PrototypeBank, weights: SslWeights, epochs, rng: nc.Rng,
                 lr=config.SSL_LR, batch_groups=config.SSL_BATCH_GROUPS,
                 aug: Optional[AugmentationConfig] = None, ablations: Sequence[str] = (),
                 log_every=config.LOG_EVERY_STEPS, report: Optional[TrainReport] = None):
    """
    Self-supervised pretraining over the heuristic replay buffer

    Each minibatch: encode online and EMA views, EMA update, optimizer step on
    the SSL loss, prototype renormalization, enqueue the EMA latents.

    Returns:
        (params, TrainReport)
    """
    if len(buffer) == 0:
        raise ConfigError("replay buffer is empty; run collect first")
    groups = buffer.groups()
    if not groups:
        raise ConfigError("replay buffer has no complete timestep groups")
    report = report or TrainReport()
    started = time.time()
    optimizer = nc.Adam(params.all() + [bank.prototypes], lr)
    step = 0
    for epoch in range(epochs):
        order = rng.child('epoch', epoch).permutation(len(groups))
        sums = defaultdict(float)
        batches = 0
        for batch_index, picked in enumerate(chunk(list(order), batch_groups)):
            batch = build_ssl_batch(buffer, [groups[i] for i in picked], weights.horizon)
            if batch.size < 2:
                continue
            total, breakdown, ema_latents = total_ssl_loss(
                batch, params, target, queue, bank, weights,
                rng.child('batch', epoch, batch_index), aug=aug, ablations=ablations,
            )
            if not np.isfinite(total.item()):
                raise NumericalAbort(f"non-finite SSL loss at epoch {epoch} batch {batch_index}")
            target.update(params)
            optimizer.zero_grad()
            nc.backward(total, params=optimizer.params)
            optimizer.step()
            bank.renormalize()
            queue.push(ema_latents)

            step += 1
            report.optimizer_steps += 1
            report.ssl_steps.append({'step': step, 'epoch': epoch, **{k: breakdown[k] for k in BREAKDOWN_KEYS}})
            for key in EPOCH_KEYS:
                sums[key] += breakdown[key]
            batches += 1
            if log_every and step % log_every == 0:
                log(f"[INFO] SSL step {step} epoch {epoch + 1}/{epochs} loss {breakdown['total']:.4f}")
        if batches:
            report.ssl_epochs.append({'epoch': epoch, **{k: sums[k] / batches for k in EPOCH_KEYS}})
            log(f"[OK] SSL epoch {epoch + 1}/{epochs} mean loss {sums['total'] / batches:.4f}")
    report.warnings = dict(WARNING_COUNTERS)
    report.timing['pretrain_seconds'] = time.time() - started
    return params, report


# ----------------------------------------------------------------------------
# Phase II
# ----------------------------------------------------------------------------

def gae_advantages(rewards, values, dones, gamma, lam, bootstrap=0.0, normalize=True):
    """
    Generalized advantage estimation over one reward stream

    Args:
        rewards, values, dones: Equal-length sequences
        bootstrap: Value of the state after the last step (ignored when it is terminal)
        normalize: Standardize advantages to mean 0, std 1 when there is spread

    Returns:
        (advantages, returns) as ndarrays; returns use the raw advantages
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise StructuralError("rewards, values and dones must have equal length")
    advantages = np.zeros_like(rewards)
    last = 0.0
    next_value = bootstrap
    for t in reversed(range(len(rewards))):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
        next_value = values[t]
    returns = advantages + values
    if normalize:
        advantages = normalize_advantages(advantages)
    return advantages, returns


def normalize_advantages(advantages):
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size < 2 or advantages.std() == 0:
        return advantages
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


@dataclass
class Rollout:
    """Flat on-policy samples (one row per agent-step)"""
    obs: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    @property
    def size(self):
        return self.obs.shape[0]


def ppo_loss(params: EncoderParams, obs, mask, actions, old_log_probs, advantages, returns, ppo_cfg: PpoConfig,
             affinity: Optional[ProtoAffinity] = None):
    """
    Clipped surrogate + value regression - entropy bonus

    Returns:
        (L_PPO Tensor, stats dict)
    """
    logits, values, _ = act_forward(params, obs, mask, ppo_cfg.beta, affinity)
    log_probs_all = nc.log_softmax(logits, axis=-1)
    log_probs = nc.pick(log_probs_all, np.asarray(actions) - 1)
    ratio = nc.exp(log_probs - np.asarray(old_log_probs))
    adv = np.asarray(advantages, dtype=np.float64)
    surrogate = nc.minimum(ratio * adv, nc.clip(ratio, 1.0 - ppo_cfg.clip, 1.0 + ppo_cfg.clip) * adv)
    policy_loss = -nc.mean(surrogate)
    value_error = values - np.asarray(returns, dtype=np.float64)
    value_loss = nc.mean(value_error * value_error)
    entropy = -nc.mean(nc.tsum(nc.exp(log_probs_all) * log_probs_all, axis=-1))
    loss = policy_loss + value_loss * ppo_cfg.value_coef - entropy * ppo_cfg.entropy_coef
    stats = {
        'policy_loss': policy_loss.item(),
        'value_loss': value_loss.item(),
        'entropy': entropy.item(),
        'clip_fraction': float(np.mean(np.abs(ratio.data - 1.0) > ppo_cfg.clip)),
    }
    return loss, stats


def ppo_update(rollout: Rollout, params: EncoderParams, optimizer: nc.Optimizer, ppo_cfg: PpoConfig,
               rng: nc.Rng, lam=0.0, aux=None, target: Optional[EmaTarget] = None,
               queue: Optional[MemoryQueue] = None, affinity: Optional[ProtoAffinity] = None):
    """
    Minimize the PPO objective over epochs x minibatches

    Args:
        rollout: Samples collected with the current parameters
        lam: Curriculum weight λ(t) on the auxiliary term
        aux: Zero-argument callable returning (L_aux Tensor, terms, EMA latents), or None
        target, queue: EMA target and memory queue kept in sync after each step

    Returns:
        Dict of mean statistics; 'total' equals L_PPO + lam * L_aux
    """
    sums = defaultdict(float)
    updates = 0
    for epoch in range(ppo_cfg.epochs):
        order = rng.child('ppo_epoch', epoch).permutation(rollout.size)
        for picked in chunk(list(order), ppo_cfg.minibatch):
            idx = np.asarray(picked, dtype=np.int64)
            l_ppo, stats = ppo_loss(
                params, rollout.obs[idx], rollout.mask[idx], rollout.actions[idx],
                rollout.log_probs[idx], rollout.advantages[idx], rollout.returns[idx], ppo_cfg, affinity,
            )
            total = l_ppo
            l_aux = 0.0
            ema_latents = None
            if aux is not None and lam > 0:
                aux_loss, _, ema_latents = aux()
                l_aux = aux_loss.item()
                total = l_ppo + aux_loss * lam
            if not np.isfinite(total.item()):
                raise NumericalAbort(f"non-finite PPO loss in epoch {epoch}")
            params.zero_grad()
            nc.backward(total, params=optimizer.params)
            optimizer.step()
            if target is not None:
                target.update(params)
            if queue is not None and ema_latents is not None:
                queue.push(ema_latents)
            for key, value in stats.items():
                sums[key] += value
            sums['L_PPO'] += l_ppo.item()
            sums['L_aux'] += l_aux
            sums['total'] += l_ppo.item() + lam * l_aux
            updates += 1
    means = {key: value / max(updates, 1) for key, value in sums.items()}
    means["updates"] = updates
    return means


def sample_policy_actions(params: EncoderParams, observations, beta, rng: nc.Rng, greedy=False,
                          affinity: Optional[ProtoAffinity] = None):
    """
    Actions for all agents from the current policy (no graph recorded)

    Returns:
        (actions list of 1-based ints, log-probabilities ndarray, values ndarray)
    """
    obs = np.array([o.vector() for o in observations])
    mask = np.array([o.mask for o in observations])
    with nc.no_grad():
        logits, values, _ = act_forward(params, obs, mask, beta, affinity)
    probs = action_probs(logits.data)
    if greedy:
        choices = np.argmax(probs, axis=1)
    else:
        choices = np.array([rng.choice(probs.shape[1], p=p) for p in probs])
    log_probs = np.log(probs[np.arange(len(choices)), choices])
    return [int(c) + 1 for c in choices], log_probs, values.data.copy()


def run_policy_episode(params: EncoderParams, env_cfg: wenv.WarehouseConfig, seed, beta,
                       rng: nc.Rng, greedy=False, affinity: Optional[ProtoAffinity] = None):
    """Play one full episode with the policy; returns its StepRecords"""
    state, observations = wenv.reset(seed, env_cfg)
    records = []
    while not state.done:
        actions, _, _ = sample_policy_actions(params, observations, beta, rng, greedy, affinity)
        state, observations, _, _, record = wenv.step(state, actions)
        records.append(record)
    return records


def _collect_rollout(params, env, ppo_cfg: PpoConfig, rng: nc.Rng, episode_counter, affinity=None):
    """
    Step the persistent environment ppo_cfg.steps_per_iter times

    env is a dict holding 'state', 'obs', 'records', 'episode' and 'env_rng'; it
    survives across iterations.
    """
    cfg = env['state'].cfg
    n = cfg.n_agents
    steps = ppo_cfg.steps_per_iter
    obs = np.zeros((steps, n, cfg.obs_dim))
    mask = np.zeros((steps, n, cfg.k_candidates), dtype=bool)
    actions = np.zeros((steps, n), dtype=np.int64)
    log_probs = np.zeros((steps, n))
    values = np.zeros((steps, n))
    rewards = np.zeros((steps, n))
    dones = np.zeros(steps, dtype=bool)
    episode_ids = np.zeros(steps, dtype=np.int64)
    times = np.zeros(steps, dtype=np.int64)
    finished = []

    for s in range(steps):
        observations = env['obs']
        obs[s] = [o.vector() for o in observations]
        mask[s] = [o.mask for o in observations]
        episode_ids[s] = env['episode']
        times[s] = env['state'].t
        acts, logp, vals = sample_policy_actions(params, observations, ppo_cfg.beta, rng.child('act', s),
                                                 affinity=affinity)
        state, next_obs, step_rewards, done, record = wenv.step(env['state'], acts)
        actions[s], log_probs[s], values[s], rewards[s], dones[s] = acts, logp, vals, step_rewards, done
        env['records'].append(record)
        env['obs'] = next_obs
        if done:
            finished.append(env['records'])
            env['episode'] = next(episode_counter)
            env['records'] = []
            env['state'], env['obs'] = wenv.reset(env['env_rng'].child('episode', env['episode']).seed, cfg)

    if dones[-1]:
        bootstrap = np.zeros(n)
    else:
        _, _, bootstrap = sample_policy_actions(params, env['obs'], ppo_cfg.beta, rng.child('bootstrap'),
                                             affinity=affinity)
    advantages = np.zeros((steps, n))
    returns = np.zeros((steps, n))
    for agent in range(n):
        advantages[:, agent], returns[:, agent] = gae_advantages(
            rewards[:, agent], values[:, agent], dones, ppo_cfg.gamma, ppo_cfg.gae_lambda,
            bootstrap=bootstrap[agent], normalize=False,
        )

    rollout = Rollout(
        obs=obs.reshape(steps * n, -1),
        mask=mask.reshape(steps * n, -1),
        actions=actions.reshape(-1),
        log_probs=log_probs.reshape(-1),
        advantages=normalize_advantages(advantages.reshape(-1)),
        returns=returns.reshape(-1),
    )
    buffer = TrajectoryBuffer(cfg.obs_dim, cfg.k_candidates)
    for s in range(steps):
        for agent in range(n):
            buffer.add(TrajectoryRecord(
                episode=int(episode_ids[s]), t=int(times[s]), agent=agent, obs=obs[s, agent],
                mask=mask[s, agent], action=int(actions[s, agent]), reward=float(rewards[s, agent]),
                done=bool(dones[s]), label=-1,
            ))
    return rollout, buffer, finished


def _episode_summary(finished, ongoing):
    episodes = finished if finished else ([ongoing] if ongoing else [])
    if not episodes:
        return {'mean_return': 0.0, 'deliveries_per_ep': 0.0, 'unassigned_pct': 0.0, 'episodes': 0}
    kpis = [wenv.episode_kpis(records) for records in episodes]
    returns = [float(sum(np.sum(r.rewards) for r in records)) for records in episodes]
    return {
        'mean_return': float(np.mean(returns)),
        'deliveries_per_ep': float(np.mean([k['deliveries'] for k in kpis])),
        'unassigned_pct': float(np.mean([k['unassigned_pct'] for k in kpis])),
        'episodes': len(finished),
    }


def _write_nan_dump(out_dir, iteration, message, params: EncoderParams):
    path = os.path.join(out_dir, f"nan_dump_{iteration}.json")
    dump = {
        'iteration': iteration,
        'error': message,
        'non_finite_params': sorted(
            name for name in params.names() if not np.all(np.isfinite(params[name].data))
        ),
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(dump, f, indent=2, sort_keys=True)
    return path


def finetune(env_cfg: wenv.WarehouseConfig, params: EncoderParams, ppo_cfg: PpoConfig,
             schedule: Optional[CurriculumSchedule], iterations, rng: nc.Rng,
             target: Optional[EmaTarget] = None, queue: Optional[MemoryQueue] = None,
             weights: Optional[SslWeights] = None, ablations: Sequence[str] = (),
             out_dir=None, report: Optional[TrainReport] = None, prototypes=None):
    """
    PPO fine-tuning with the curriculum-weighted temporal auxiliary loss

    Args:
        env_cfg: Warehouse configuration (episode_length T)
        params: Pretrained (or freshly initialized) parameters, updated in place
        schedule: Curriculum; ramp_steps defaults to half the total environment steps
        iterations: Collect/update cycles
        rng: Seeded stream; environment, actions, minibatches and aux batches use separate children
        target, queue: Carried over from pretraining when given
        prototypes: Pretrained prototype matrix for the affinity bias (used when affinity_beta > 0)
        ablations: 'no_curriculum' pins λ(t) to lambda_max
        out_dir: Where nan_dump_<iter>.json files go

    Returns:
        (params, TrainReport)
    """
    ppo_cfg.validate()
    env_cfg.validate()
    weights = weights or SslWeights()
    report = report or TrainReport()
    started = time.time()
    total_steps = iterations * ppo_cfg.steps_per_iter
    if schedule is None:
        schedule = CurriculumSchedule(ramp_steps=max(1, int(total_steps * config.CURRICULUM_RAMP_FRACTION)))
    schedule.validate()
    if target is None:
        target = EmaTarget(params, params.cfg.ema_momentum)
    if queue is None:
        queue = MemoryQueue(config.QUEUE_CAPACITY, params.cfg.latent_dim)
    affinity = None
    if ppo_cfg.affinity_beta:
        if prototypes is None:
            warn_once('no_affinity_prototypes', "no prototypes available; proto affinity bias disabled")
        else:
            affinity = ProtoAffinity(np.asarray(prototypes), ppo_cfg.affinity_beta, weights.temperature)
            affinity.validate(params)

    groups = ('ssl', 'policy') if ppo_cfg.encoder_mode == "frozen" else ('encoder', 'ssl', 'policy')
    optimizer = nc.Adam(params.group(*groups), ppo_cfg.lr)

    counter = iter(range(1, 1 << 62))
    env_rng = rng.child('env')
    state, obs = wenv.reset(env_rng.child('episode', 0).seed, env_cfg)
    env = {'state': state, 'obs': obs, 'records': [], 'episode': 0, 'env_rng': env_rng}
    env_steps = 0

    for iteration in range(iterations):
        if 'no_curriculum' in ablations:
            lam = schedule.lambda_max
        else:
            lam = curriculum_lambda(env_steps, schedule)
        snapshot = params.arrays()
        target_snapshot = target.params.arrays()
        optimizer_snapshot = (list(m.copy() for m in optimizer.m), list(v.copy() for v in optimizer.v), list(optimizer.t))
        queue_snapshot = queue.state()

        it_rng = rng.child('iteration', iteration)
        rollout, buffer, finished = _collect_rollout(params, env, ppo_cfg, it_rng.child('collect'), counter, affinity)
        env_steps += ppo_cfg.steps_per_iter
        report.env_steps = env_steps

        groups_available = buffer.groups()
        aux_rng = it_rng.child('aux')
        aux_draws = iter(range(1 << 62))

        def aux():
            n_groups = max(1, ppo_cfg.aux_batch // env_cfg.n_agents)
            picks = aux_rng.child('draw', next(aux_draws)).permutation(len(groups_available))[:n_groups]
            batch = build_ssl_batch(buffer, [groups_available[i] for i in picks], weights.horizon)
            return auxiliary_temporal_loss(batch, params, target, queue, weights)

        try:
            stats = ppo_update(rollout, params, optimizer, ppo_cfg, it_rng.child('update'),
                               lam=lam, aux=aux, target=target, queue=queue, affinity=affinity)
        except (NumericalAbort, DomainError) as e:
            params.load_arrays(snapshot)
            target.params.load_arrays(target_snapshot)
            optimizer.m, optimizer.v, optimizer.t = optimizer_snapshot
            queue.load_state(queue_snapshot)
            report.nan_aborts.append(iteration)
            log(f"[ERROR] Iteration {iteration + 1} aborted: {e}")
            if out_dir:
                _write_nan_dump(out_dir, iteration, str(e), params)
            continue
        report.optimizer_steps += stats['updates']

        row = {'iteration': iteration, 'env_steps': env_steps, 'lambda': lam,
               **_episode_summary(finished, env['records'])}
        row.update({key: stats.get(key, 0.0) for key in ITERATION_KEYS if key not in row})
        report.ppo_iterations.append(row)
        log(f"[INFO] PPO iteration {iteration + 1}/{iterations} "
            f"deliveries/ep {row['deliveries_per_ep']:.2f} unassigned {row['unassigned_pct']:.1f}% "
            f"clip {row['clip_fraction']:.3f} lambda {lam:.4f}")

    report.warnings = dict(WARNING_COUNTERS)
    report.timing['finetune_seconds'] = time.time() - started
    return params, report


def finetune_from_scratch(env_cfg: wenv.WarehouseConfig, enc_cfg: EncoderConfig, ppo_cfg: PpoConfig,
                          schedule, iterations, seed, **kwargs):
    """Fine-tune from a random initialization drawn with the same seed a pretraining run would use"""
    params = EncoderParams.init(enc_cfg, nc.Rng(seed).child('init'))
    return finetune(env_cfg, params, ppo_cfg, schedule, iterations, nc.Rng(seed).child('finetune'), **kwargs)
