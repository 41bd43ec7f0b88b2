"""
Unit tests for evalmetrics.py
Tests retrieval, clustering, probing and CKA metrics plus the KPI summary
"""
import unittest
from unittest.mock import patch

import numpy as np

import evalmetrics as em
import numcore as nc
import warehouse_env as wenv
from encoder import EncoderConfig, EncoderParams
from scalecomm_utils import DomainError, StructuralError
from ssl_losses import AugmentationConfig

TINY = EncoderConfig(k_candidates=2, hidden_dim=8, latent_dim=6, message_dim=4, attention_dim=3)
ENV = wenv.WarehouseConfig(width=5, height=5, n_agents=2, k_candidates=2, episode_length=6, task_pool_size=4)


def trajectory_dataset(latents, predictions):
    """Single-agent, single-episode dataset with t = row number"""
    n = len(latents)
    return em.EvalDataset(
        messages=np.ones((n, 2)), latents=latents, hidden=np.ones((n, 2)), keys=np.ones((n, 2)),
        predictions=predictions, labels=np.zeros(n, dtype=np.int64),
        index=np.stack([np.zeros(n, dtype=np.int64), np.arange(n), np.zeros(n, dtype=np.int64)], axis=1),
    )


class TestRetrieval(unittest.TestCase):
    """Test R@1 and Temp@1"""

    def test_recall_identity(self):
        """Test matching rows retrieve themselves"""
        x = nc.Rng(0).normal(size=(6, 3))
        self.assertEqual(em.recall_at_1(x, x), 1.0)

    def test_recall_swapped(self):
        """Test swapped galleries retrieve nothing"""
        self.assertEqual(em.recall_at_1(np.eye(2), np.eye(2)[::-1]), 0.0)

    def test_recall_ties_go_to_lowest_index(self):
        """Test identical gallery rows resolve to the first one"""
        rows = np.array([[1.0, 0.0], [1.0, 0.0]])
        self.assertEqual(em.recall_at_1(rows, rows), 0.5)

    def test_recall_shape_mismatch(self):
        """Test unequal row counts raise StructuralError"""
        with self.assertRaises(StructuralError):
            em.recall_at_1(np.eye(3), np.eye(2, 3))

    def test_temporal_oracle(self):
        """Test predictions equal to the true future latent score 1"""
        latents = np.eye(5)
        predictions = np.roll(latents, -1, axis=0)
        self.assertEqual(em.temporal_at_1(trajectory_dataset(latents, predictions), k=1), 1.0)

    def test_temporal_without_successors(self):
        """Test a horizon beyond the episode raises DomainError"""
        with self.assertRaises(DomainError):
            em.temporal_at_1(trajectory_dataset(np.eye(5), np.eye(5)), k=10)


class TestClusteringAndProbe(unittest.TestCase):
    """Test ProtoNMI and the linear probe"""

    def setUp(self):
        self.labels = np.tile(np.arange(4), 20)

    def test_nmi_perfect(self):
        """Test messages sitting on their class prototype give NMI 1"""
        prototypes = np.eye(4)
        self.assertAlmostEqual(em.proto_nmi(prototypes[self.labels], prototypes, self.labels), 1.0)

    def test_nmi_single_cluster(self):
        """Test one occupied prototype scores 0"""
        messages = np.tile([1.0, 0.0, 0.0, 0.0], (len(self.labels), 1))
        self.assertEqual(em.proto_nmi(messages, np.eye(4), self.labels), 0.0)

    def test_nmi_matches_entropy_loop(self):
        """Test NMI against mutual information and entropies counted from joint frequencies"""
        rng = nc.Rng(11)
        for instance in range(50):
            draw = rng.child(instance)
            messages = draw.normal(0.0, 1.0, (30, 3))
            prototypes = draw.normal(0.0, 1.0, (4, 3))
            labels = draw.integers(0, 3, 30)
            labels[:2] = [0, 1]
            clusters = np.argmax(messages @ prototypes.T, axis=1)
            if len(set(clusters)) < 2:
                expected = 0.0
            else:
                n = len(labels)
                mi = 0.0
                for a in set(labels):
                    for b in set(clusters):
                        joint = np.sum((labels == a) & (clusters == b)) / n
                        if joint > 0:
                            mi += joint * np.log(joint / (np.mean(labels == a) * np.mean(clusters == b)))
                h_labels = -sum(np.mean(labels == a) * np.log(np.mean(labels == a)) for a in set(labels))
                h_clusters = -sum(np.mean(clusters == b) * np.log(np.mean(clusters == b)) for b in set(clusters))
                expected = mi / (0.5 * (h_labels + h_clusters))
            self.assertAlmostEqual(em.proto_nmi(messages, prototypes, labels), expected, places=10)

    def test_nmi_needs_two_classes(self):
        """Test a single label class raises DomainError"""
        with self.assertRaises(DomainError):
            em.proto_nmi(np.eye(4), np.eye(4), np.zeros(4, dtype=np.int64))

    def test_probe_separable(self):
        """Test well-separated classes are probed almost perfectly"""
        latents = 5.0 * np.eye(4)[self.labels] + 0.1 * nc.Rng(1).normal(size=(80, 4))
        self.assertGreaterEqual(em.probe_accuracy(latents, self.labels, seed=0), 0.95)

    def test_linear_readout_chance_on_shuffled_labels(self):
        """Test latents unrelated to shuffled labels are read out near 1/4 accuracy"""
        rng = nc.Rng(2)
        latents = rng.normal(0.0, 1.0, (2000, 8))
        labels = np.tile(np.arange(4), 500)[rng.permutation(2000)]
        self.assertLessEqual(abs(em.probe_accuracy(latents, labels, seed=0) - 0.25), 0.1)

    def test_probe_too_few_rows(self):
        """Test fewer than 20 rows raise DomainError"""
        with self.assertRaises(DomainError):
            em.probe_accuracy(np.eye(8), np.arange(8) % 2, seed=0)


class TestCka(unittest.TestCase):
    """Test linear CKA"""

    def setUp(self):
        self.x = nc.Rng(2).normal(size=(30, 4))

    def test_identity(self):
        """Test CKA(X, X) is 1"""
        self.assertAlmostEqual(em.linear_cka(self.x, self.x), 1.0)

    def test_rotation_and_scale_invariance(self):
        """Test an orthogonal transform and isotropic scaling leave CKA at 1"""
        q, _ = np.linalg.qr(nc.Rng(3).normal(size=(4, 4)))
        self.assertAlmostEqual(em.linear_cka(self.x, 3.0 * self.x @ q), 1.0)

    def test_unrelated_inputs(self):
        """Test independent inputs score well below 1"""
        y = nc.Rng(4).normal(size=(30, 4))
        self.assertLess(em.linear_cka(self.x, y), 0.9)

    def test_matches_gram_form(self):
        """Test the feature-space formula against the Gram-matrix HSIC form"""
        rng = nc.Rng(5)
        for trial in range(20):
            x = rng.normal(size=(12, 3))
            y = rng.normal(size=(12, 5))
            xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
            gram_x, gram_y = xc @ xc.T, yc @ yc.T
            expected = np.sum(gram_x * gram_y) / np.sqrt(np.sum(gram_x * gram_x) * np.sum(gram_y * gram_y))
            self.assertAlmostEqual(em.linear_cka(x, y), expected, places=10, msg=f"trial {trial}")

    def test_zero_variance(self):
        """Test a constant input raises DomainError"""
        with self.assertRaises(DomainError):
            em.linear_cka(self.x, np.ones((30, 2)))


class TestDatasetAndReport(unittest.TestCase):
    """Test EvalDataset, MetricsReport and KPIs"""

    def test_dataset_row_mismatch(self):
        """Test arrays with different row counts are rejected"""
        with self.assertRaises(StructuralError):
            trajectory_dataset(np.eye(5), np.eye(4))

    def test_dataset_label_range(self):
        """Test labels outside the category range are rejected"""
        dataset = trajectory_dataset(np.eye(3), np.eye(3))
        with self.assertRaises(StructuralError):
            em.EvalDataset(dataset.messages, dataset.latents, dataset.hidden, dataset.keys,
                           dataset.predictions, np.array([0, 1, 4]), dataset.index)

    def test_build_from_buffer(self):
        """Test every buffer row is encoded into unit-norm messages"""
        buffer = wenv.collect_heuristic_dataset(1, 6, 0, ENV)
        dataset = em.build_eval_dataset(buffer, EncoderParams.init(TINY, nc.Rng(0)))
        self.assertEqual(dataset.size, len(buffer))
        self.assertEqual(dataset.keys.shape, (len(buffer), TINY.message_dim))
        self.assertEqual(dataset.predictions.shape, (len(buffer), TINY.latent_dim))
        np.testing.assert_allclose(np.linalg.norm(dataset.messages, axis=1), np.ones(len(buffer)))

    def test_view_agreement_without_augmentation(self):
        """Test identical views agree perfectly"""
        buffer = wenv.collect_heuristic_dataset(1, 4, 0, ENV)
        params = EncoderParams.init(TINY, nc.Rng(0))
        score = em.view_agreement(buffer, params, AugmentationConfig(0.0, 0.0, 0.0), nc.Rng(1))
        self.assertAlmostEqual(score, 1.0)

    def test_metrics_range(self):
        """Test a metric outside [0, 1] raises DomainError"""
        with self.assertRaises(DomainError):
            em.MetricsReport(0.5, 0.5, 0.5, 1.2, 0.5)

    def test_row_layout(self):
        """Test table rows follow the metric column order"""
        row = em.MetricsReport(0.1, 0.2, 0.3, 0.4, 0.5).as_row("SCALE-COMM")
        self.assertEqual(list(row), em.METRIC_COLUMNS)
        self.assertEqual(row['Method'], "SCALE-COMM")

    def test_idle_kpis(self):
        """Test always-idle episodes give zero deliveries and 100% unassigned"""
        episodes = []
        for seed in range(2):
            state, _ = wenv.reset(seed, ENV)
            records = []
            while not state.done:
                state, _, _, _, record = wenv.step(state, [ENV.n_actions] * ENV.n_agents)
                records.append(record)
            episodes.append(records)
        kpis = em.kpi_summary(episodes)
        self.assertEqual(kpis['deliveries_mean'], 0.0)
        self.assertEqual(kpis['deliveries_sd'], 0.0)
        self.assertAlmostEqual(kpis['unassigned_pct'], 100.0)
        self.assertEqual(kpis['episodes'], 2)


class TestEvaluate(unittest.TestCase):
    """Test the full evaluation entry point"""

    @patch('evalmetrics.probe_accuracy', return_value=0.5)
    def test_reproducible(self, _probe):
        """Test evaluation is a deterministic function of the seed"""
        params = EncoderParams.init(TINY, nc.Rng(0))
        prototypes = np.eye(3, TINY.message_dim)
        kwargs = dict(collect_episodes=3, collect_steps=20, rollout_episodes=2, horizon=1)
        report_a, kpis_a = em.evaluate(params, prototypes, ENV, 5, **kwargs)
        report_b, kpis_b = em.evaluate(params, prototypes, ENV, 5, **kwargs)
        self.assertEqual(report_a.to_dict(), report_b.to_dict())
        self.assertEqual(kpis_a, kpis_b)
        self.assertEqual(report_a.probe_acc, 0.5)
        self.assertEqual(kpis_a['episodes'], 2)


if __name__ == '__main__':
    unittest.main()
