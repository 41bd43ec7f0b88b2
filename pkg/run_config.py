"""
YAML run configuration and per-run manifest

A run config has the sections environment / encoder / ssl / trainer / eval plus a
top-level seed. Missing keys take the defaults from config.py; unknown keys are
rejected with their dotted name.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from typing import List, Optional

import yaml

import config
from encoder import EncoderConfig
from scalecomm_utils import ConfigError
from ssl_losses import ABLATIONS, AugmentationConfig, SslWeights
from trainer import CurriculumSchedule, PpoConfig
from warehouse_env import RewardConfig, WarehouseConfig


@dataclass
class RewardSection:
    r_assign: float = config.R_ASSIGN
    r_pick: float = config.R_PICK
    r_drop: float = config.R_DROP
    r_unassigned: float = config.R_UNASSIGNED


@dataclass
class EnvironmentSection:
    width: int = config.GRID_WIDTH
    height: int = config.GRID_HEIGHT
    n_agents: int = config.N_AGENTS
    k_candidates: int = config.K_CANDIDATES
    episode_length: int = config.EPISODE_LENGTH
    task_pool_size: int = config.TASK_POOL_SIZE
    collect_episodes: int = config.COLLECT_EPISODES
    collect_steps: int = config.COLLECT_STEPS
    rewards: RewardSection = field(default_factory=RewardSection)


@dataclass
class EncoderSection:
    hidden_dim: int = config.HIDDEN_DIM
    latent_dim: int = config.LATENT_DIM
    message_dim: int = config.MESSAGE_DIM
    attention_dim: int = config.ATTENTION_DIM
    ema_momentum: float = config.EMA_MOMENTUM
    norm_eps: float = config.NORM_EPS


@dataclass
class SslSection:
    alpha: float = config.SSL_ALPHA
    beta: float = config.SSL_BETA
    gamma_cpc: float = config.SSL_GAMMA_CPC
    delta: float = config.SSL_DELTA
    eta: float = config.SSL_ETA
    lambdas: List[float] = field(default_factory=lambda: list(config.INV_LAMBDAS))
    temperature: float = config.TEMPERATURE
    horizon: int = config.CPC_HORIZON
    queue_capacity: int = config.QUEUE_CAPACITY
    n_prototypes: int = config.N_PROTOTYPES
    mask_prob: float = config.AUG_MASK_PROB
    jitter_std: float = config.AUG_JITTER_STD
    dropout: float = config.AUG_DROPOUT
    epochs: int = config.SSL_EPOCHS
    batch_groups: int = config.SSL_BATCH_GROUPS
    lr: float = config.SSL_LR
    view_weight: float = config.SSL_VIEW_WEIGHT
    log_every: int = config.LOG_EVERY_STEPS
    ablations: List[str] = field(default_factory=list)


@dataclass
class TrainerSection:
    iterations: int = config.PPO_ITERATIONS
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
    lambda_min: float = config.CURRICULUM_LAMBDA_MIN
    lambda_max: float = config.CURRICULUM_LAMBDA_MAX
    ramp_fraction: float = config.CURRICULUM_RAMP_FRACTION


@dataclass
class EvalSection:
    episodes: int = config.EVAL_EPISODES
    collect_episodes: int = config.EVAL_COLLECT_EPISODES
    probe_max_iter: int = config.PROBE_MAX_EPOCHS
    probe_tol: float = config.PROBE_TOL


@dataclass
class RunConfig:
    environment: EnvironmentSection = field(default_factory=EnvironmentSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    ssl: SslSection = field(default_factory=SslSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = config.DEFAULT_SEED

    @classmethod
    def from_dict(cls, data):
        cfg = _build(cls, data or {}, "")
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    # Domain configs -----------------------------------------------------------

    def warehouse_config(self, episode_length=None):
        env = self.environment
        return WarehouseConfig(
            width=env.width, height=env.height, n_agents=env.n_agents, k_candidates=env.k_candidates,
            episode_length=episode_length or env.episode_length, task_pool_size=env.task_pool_size,
            rewards=RewardConfig(**asdict(env.rewards)),
        )

    def encoder_config(self):
        return EncoderConfig(k_candidates=self.environment.k_candidates, **asdict(self.encoder))

    def ssl_weights(self):
        s = self.ssl
        return SslWeights(alpha=s.alpha, beta=s.beta, gamma_cpc=s.gamma_cpc, delta=s.delta, eta=s.eta,
                          lambdas=tuple(s.lambdas), temperature=s.temperature, horizon=s.horizon,
                          view=s.view_weight)

    def augmentation(self):
        return AugmentationConfig(self.ssl.mask_prob, self.ssl.jitter_std, self.ssl.dropout)

    def ppo_config(self):
        t = self.trainer
        return PpoConfig(
            clip=t.clip, gamma=t.gamma, gae_lambda=t.gae_lambda, epochs=t.epochs,
            steps_per_iter=t.steps_per_iter, minibatch=t.minibatch, entropy_coef=t.entropy_coef,
            value_coef=t.value_coef, lr=t.lr, aux_batch=t.aux_batch, bias_enabled=t.bias_enabled,
            bias_beta=t.bias_beta, affinity_beta=t.affinity_beta, encoder_mode=t.encoder_mode,
        )

    def curriculum(self):
        t = self.trainer
        total = t.iterations * t.steps_per_iter
        return CurriculumSchedule(t.lambda_min, t.lambda_max, max(1, int(total * t.ramp_fraction)))

    def validate(self):
        self.warehouse_config().validate()
        self.warehouse_config(self.environment.collect_steps).validate()
        self.ssl_weights().validate()
        self.augmentation().validate()
        self.ppo_config().validate()
        self.curriculum().validate()
        enc = self.encoder
        if not 0.0 <= enc.ema_momentum < 1.0:
            raise ConfigError("encoder.ema_momentum must lie in [0, 1)")
        for name in ('hidden_dim', 'latent_dim', 'message_dim', 'attention_dim'):
            if getattr(enc, name) < 1:
                raise ConfigError(f"encoder.{name} must be >= 1")
        if enc.norm_eps <= 0:
            raise ConfigError("encoder.norm_eps must be positive")
        if self.ssl.queue_capacity < 1 or self.ssl.n_prototypes < 2:
            raise ConfigError("ssl.queue_capacity must be >= 1 and ssl.n_prototypes >= 2")
        if self.ssl.epochs < 0 or self.ssl.batch_groups < 1 or self.ssl.lr <= 0:
            raise ConfigError("ssl.epochs >= 0, ssl.batch_groups >= 1 and ssl.lr > 0 required")
        unknown = set(self.ssl.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"ssl.ablations has unknown entries {sorted(unknown)}")
        if self.environment.collect_episodes < 1:
            raise ConfigError("environment.collect_episodes must be >= 1")
        if self.trainer.iterations < 0 or not 0.0 < self.trainer.ramp_fraction <= 1.0:
            raise ConfigError("trainer.iterations >= 0 and trainer.ramp_fraction in (0, 1] required")
        if self.eval.episodes < 1 or self.eval.collect_episodes < 1 or self.eval.probe_max_iter < 1:
            raise ConfigError("eval episode counts and probe_max_iter must be >= 1")
        return self


def _check_type(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return list(value)
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    instance = cls()
    for f in fields(cls):
        if f.name not in data:
            continue
        default = getattr(instance, f.name)
        key = f"{prefix}{f.name}"
        if hasattr(default, '__dataclass_fields__'):
            setattr(instance, f.name, _build(type(default), data[f.name], key + "."))
        else:
            setattr(instance, f.name, _check_type(data[f.name], default, key))
    return instance


def load_run_config(path=None, seed=None, ablations=None):
    """
    Parse and validate a YAML run config

    Args:
        path: YAML file, or None for all defaults
        seed: Optional seed override
        ablations: Optional extra ablation flags merged into ssl.ablations
    """
    data = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}")
    cfg = RunConfig.from_dict(data)
    if seed is not None:
        cfg.seed = int(seed)
    if ablations:
        cfg.ssl.ablations = sorted(set(cfg.ssl.ablations) | set(ablations))
    return cfg.validate()


def dump_run_config(cfg: RunConfig, path=None):
    """Canonical YAML text (sorted keys); also written to path when given"""
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
    if path:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
    return text


def config_hash(cfg: RunConfig, sections=None):
    """SHA-256 of the canonical YAML dump, optionally restricted to some top-level sections"""
    data = cfg.to_dict()
    if sections:
        data = {name: data[name] for name in sections}
    text = yaml.safe_dump(data, sort_keys=True, default_flow_style=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RunManifest:
    """
    manifest.json of one run directory

    Records the config hash and, per command, the artifacts it wrote so that a
    rerun with the same config can be skipped.
    """

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.path = os.path.join(run_dir, config.MANIFEST_FILE)
        self.data = {'version': f"scalecomm {config.__version__}", 'commands': {}}
        if os.path.exists(self.path):
            with open(self.path, 'r', encoding='utf-8') as f:
                self.data = json.load(f)

    def artifact(self, name):
        return os.path.join(self.run_dir, name)

    def is_complete(self, command, cfg_hash):
        entry = self.data['commands'].get(command)
        if not entry or entry.get('config_hash') != cfg_hash:
            return False
        return all(os.path.exists(self.artifact(name)) for name in entry.get('artifacts', []))

    def record(self, command, cfg_hash, artifacts, started: Optional[datetime] = None):
        now = datetime.now(timezone.utc)
        self.data['config_hash'] = cfg_hash
        self.data['version'] = f"scalecomm {config.__version__}"
        self.data['commands'][command] = {
            'config_hash': cfg_hash,
            'artifacts': sorted(artifacts),
            'started': (started or now).strftime('%Y-%m-%dT%H:%M:%SZ'),
            'finished': now.strftime('%Y-%m-%dT%H:%M:%SZ'),
        }
        self.save()

    def save(self):
        os.makedirs(self.run_dir, exist_ok=True)
        with open(self.path, 'w', encoding='utf-8') as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
