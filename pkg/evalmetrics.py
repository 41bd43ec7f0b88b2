"""
Representation-quality metrics and throughput KPIs

Metrics are computed on an EvalDataset: every row of a heuristic trajectory
buffer encoded once by the model under test.
"""
from dataclasses import dataclass, asdict
from typing import List, Optional

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import normalized_mutual_info_score
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

import config
import numcore as nc
import warehouse_env as wenv
from encoder import EncoderParams, comparator_batch, encode_batch, message_batch, predictor_batch
from scalecomm_utils import DomainError, StructuralError, chunk, log
from ssl_losses import AugmentationConfig, augment_batch
from trainer import run_policy_episode
from trajectory_buffer import TrajectoryBuffer

METRIC_COLUMNS = ['Method', 'R@1', 'Temp@1', 'ProtoNMI', 'ProbeAcc', 'CKA(m,z)']
KPI_COLUMNS = ['Method', 'Deliveries/ep', 'Deliveries SD', 'Unassigned (%)']

ENCODE_CHUNK = 4096


@dataclass
class EvalDataset:
    messages: np.ndarray
    latents: np.ndarray
    hidden: np.ndarray
    keys: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        rows = {len(self.messages), len(self.latents), len(self.hidden), len(self.keys),
                len(self.predictions), len(self.labels), len(self.index)}
        if len(rows) != 1:
            raise StructuralError("all EvalDataset arrays must share one row count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= config.N_CATEGORIES):
            raise StructuralError(f"labels must lie in [0, {config.N_CATEGORIES})")

    @property
    def size(self):
        return len(self.labels)


def build_eval_dataset(buffer: TrajectoryBuffer, params: EncoderParams):
    """Encode every buffer row: messages, latents, hidden activations, comparator keys, g(m)"""
    arrays = buffer.arrays()
    parts = {'messages': [], 'latents': [], 'hidden': [], 'keys': [], 'predictions': []}
    rows = list(range(len(buffer)))
    with nc.no_grad():
        for picked in chunk(rows, ENCODE_CHUNK):
            z, hidden = encode_batch(params, arrays['obs'][picked])
            m = message_batch(params, z)
            parts['messages'].append(m.data)
            parts['latents'].append(z.data)
            parts['hidden'].append(hidden.data)
            parts['keys'].append(comparator_batch(params, z).data)
            parts['predictions'].append(predictor_batch(params, m).data)
    return EvalDataset(
        **{name: np.concatenate(values) for name, values in parts.items()},
        labels=arrays['label'].copy(),
        index=np.stack([arrays['episode'], arrays['t'], arrays['agent']], axis=1),
    )


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("cannot compare zero vectors by cosine similarity")
    return x / norms


def recall_at_1(messages, latents):
    """
    Fraction of rows whose cosine-nearest gallery row is their own

    latents must already be projected into the message space. Ties resolve to the
    lowest gallery index.
    """
    messages = np.asarray(messages)
    latents = np.asarray(latents)
    if messages.shape[0] != latents.shape[0]:
        raise StructuralError("messages and latents must have the same rows")
    if messages.shape[0] < 2:
        raise DomainError("recall_at_1 needs at least two rows")
    sims = _unit_rows(messages) @ _unit_rows(latents).T
    nearest = np.argmax(sims, axis=1)
    return float(np.mean(nearest == np.arange(messages.shape[0])))


def temporal_at_1(dataset: EvalDataset, k=config.CPC_HORIZON):
    """
    Fraction of rows whose predicted future g(m^t) is nearest to the true z^{t+k}

    The gallery is every latent in the dataset.
    """
    lookup = {tuple(row): i for i, row in enumerate(dataset.index.tolist())}
    queries, targets = [], []
    for i, (episode, t, agent) in enumerate(dataset.index.tolist()):
        j = lookup.get((episode, t + k, agent))
        if j is not None:
            queries.append(i)
            targets.append(j)
    if not queries:
        raise DomainError(f"no rows have a successor at t+{k}")
    sims = _unit_rows(dataset.predictions[queries]) @ _unit_rows(dataset.latents).T
    return float(np.mean(np.argmax(sims, axis=1) == np.asarray(targets)))


def proto_nmi(messages, prototypes, labels):
    """
    NMI (arithmetic-mean normalization) between argmax-prototype clusters and labels

    A single-cluster assignment scores 0.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DomainError("proto_nmi needs at least two label classes")
    scores = np.asarray(messages) @ np.asarray(prototypes).T
    assignments = np.argmax(scores, axis=1)
    if len(np.unique(assignments)) < 2:
        return 0.0
    return float(normalized_mutual_info_score(labels, assignments, average_method='arithmetic'))


def probe_accuracy(latents, labels, seed, max_iter=config.PROBE_MAX_EPOCHS, tol=config.PROBE_TOL):
    """
    Held-out accuracy of an unregularized multinomial logistic probe on frozen latents

    80/20 seeded split; if a class is missing from the training part the split is
    drawn once more with the next seed before giving up.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DomainError("probe needs at least two classes")
    if len(labels) < 20:
        raise DomainError("probe needs at least 20 rows")
    for attempt in range(2):
        x_train, x_test, y_train, y_test = train_test_split(
            latents, labels, test_size=0.2, random_state=(seed + attempt) % (2 ** 32),
        )
        if len(np.unique(y_train)) == len(classes):
            break
    else:
        raise DomainError("a label class is missing from the probe training split")
    scaler = StandardScaler().fit(x_train)
    probe = LogisticRegression(penalty=None, max_iter=max_iter, tol=tol)
    probe.fit(scaler.transform(x_train), y_train)
    return float(np.mean(probe.predict(scaler.transform(x_test)) == y_test))


def linear_cka(x, y):
    """‖XcᵀYc‖²_F / (‖XcᵀXc‖_F ‖YcᵀYc‖_F) with column-centered X and Y"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise StructuralError("CKA inputs must have the same rows")
    if x.shape[0] < 2:
        raise DomainError("CKA needs at least two rows")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    if not np.any(xc) or not np.any(yc):
        raise DomainError("CKA input has zero variance")
    cross = np.linalg.norm(xc.T @ yc) ** 2
    value = cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc))
    return float(np.clip(value, 0.0, 1.0))


def view_agreement(buffer: TrajectoryBuffer, params: EncoderParams, aug: AugmentationConfig, rng: nc.Rng):
    """Mean cosine between messages of two independently augmented views of every row"""
    arrays = buffer.arrays()
    k = params.cfg.k_candidates
    first, _ = augment_batch(arrays['obs'], arrays['mask'], aug, rng.child('view', 0), k)
    second, _ = augment_batch(arrays['obs'], arrays['mask'], aug, rng.child('view', 1), k)
    with nc.no_grad():
        m1 = message_batch(params, encode_batch(params, first)[0]).data
        m2 = message_batch(params, encode_batch(params, second)[0]).data
    return float(np.mean(np.sum(m1 * m2, axis=1)))


def kpi_summary(episodes: List[list]):
    """Deliveries/ep mean and SD, and mean unassigned %, over evaluation episodes"""
    kpis = [wenv.episode_kpis(records) for records in episodes]
    deliveries = np.array([k['deliveries'] for k in kpis])
    return {
        'deliveries_mean': float(deliveries.mean()),
        'deliveries_sd': float(deliveries.std()),
        'unassigned_pct': float(np.mean([k['unassigned_pct'] for k in kpis])),
        'episodes': len(kpis),
    }


@dataclass
class MetricsReport:
    r_at_1: float
    temp_at_1: float
    proto_nmi: float
    probe_acc: float
    cka_mz: float
    cka_hidden: Optional[float] = None
    view_agreement: Optional[float] = None

    def __post_init__(self):
        for name in ('r_at_1', 'temp_at_1', 'proto_nmi', 'probe_acc', 'cka_mz'):
            value = getattr(self, name)
            if value is None or not 0.0 <= value <= 1.0:
                raise DomainError(f"metric {name}={value} outside [0, 1]")

    def as_row(self, method):
        """One row in the comparison-table column order"""
        return {
            'Method': method,
            'R@1': round(self.r_at_1, 6),
            'Temp@1': round(self.temp_at_1, 6),
            'ProtoNMI': round(self.proto_nmi, 6),
            'ProbeAcc': round(self.probe_acc, 6),
            'CKA(m,z)': round(self.cka_mz, 6),
        }

    def to_dict(self):
        return asdict(self)


def compute_metrics(dataset: EvalDataset, prototypes, seed, horizon=config.CPC_HORIZON,
                    probe_max_iter=config.PROBE_MAX_EPOCHS, probe_tol=config.PROBE_TOL):
    """The five table metrics plus hidden-layer CKA for one encoded dataset"""
    return MetricsReport(
        r_at_1=recall_at_1(dataset.messages, dataset.keys),
        temp_at_1=temporal_at_1(dataset, horizon),
        proto_nmi=proto_nmi(dataset.messages, prototypes, dataset.labels),
        probe_acc=probe_accuracy(dataset.latents, dataset.labels, seed, probe_max_iter, probe_tol),
        cka_mz=linear_cka(dataset.messages, dataset.latents),
        cka_hidden=linear_cka(dataset.hidden, dataset.latents),
    )


def evaluate(params: EncoderParams, prototypes, env_cfg: wenv.WarehouseConfig, seed,
             collect_episodes=config.EVAL_COLLECT_EPISODES, collect_steps=config.COLLECT_STEPS,
             rollout_episodes=config.EVAL_EPISODES, beta=None, horizon=config.CPC_HORIZON,
             aug: Optional[AugmentationConfig] = None, probe_max_iter=config.PROBE_MAX_EPOCHS,
             probe_tol=config.PROBE_TOL, affinity=None):
    """
    Full evaluation of one model

    Representation metrics use a freshly collected heuristic dataset; KPIs come
    from policy rollouts at the configured episode length.

    Returns:
        (MetricsReport, KPI summary dict)
    """
    rng = nc.Rng(seed).child('evaluate')
    buffer = wenv.collect_heuristic_dataset(collect_episodes, collect_steps, rng.child('data').seed, env_cfg)
    dataset = build_eval_dataset(buffer, params)
    report = compute_metrics(dataset, prototypes, rng.child("probe").seed % (2 ** 32), horizon,
                             probe_max_iter, probe_tol)
    report.view_agreement = view_agreement(buffer, params, aug or AugmentationConfig(), rng.child('views'))
    log(f"[OK] Representation metrics: R@1 {report.r_at_1:.3f} ProtoNMI {report.proto_nmi:.3f} "
        f"ProbeAcc {report.probe_acc:.3f}")

    episodes = [
        run_policy_episode(params, env_cfg, rng.child('rollout', e).seed, beta, rng.child('actions', e),
                           affinity=affinity)
        for e in range(rollout_episodes)
    ]
    kpis = kpi_summary(episodes)
    log(f"[OK] Policy KPIs: {kpis['deliveries_mean']:.2f} +/- {kpis['deliveries_sd']:.2f} deliveries/ep, "
        f"{kpis['unassigned_pct']:.1f}% unassigned")
    return report, kpis
