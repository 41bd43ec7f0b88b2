"""
Unit tests for encoder.py
Tests parameter layout, message/attention/policy heads, the EMA target and checkpoints
"""
import json
import os
import tempfile
import unittest

import numpy as np

import encoder as enc
import numcore as nc
import warehouse_env as wenv
from scalecomm_utils import DomainError, IncompatibleArtifactError, MissingArtifactError, StructuralError

TINY = enc.EncoderConfig(k_candidates=2, hidden_dim=8, latent_dim=6, message_dim=4, attention_dim=3)


def tiny_params(seed=0):
    return enc.EncoderParams.init(TINY, nc.Rng(seed))


def tiny_obs(batch=5, seed=1):
    env_cfg = wenv.WarehouseConfig(width=5, height=5, n_agents=batch, k_candidates=2,
                                   task_pool_size=batch + 2)
    _, observations = wenv.reset(seed, env_cfg)
    return observations


class TestParams(unittest.TestCase):
    """Test parameter construction"""

    def test_shapes_and_zero_biases(self):
        """Test every tensor has its declared shape and biases start at zero"""
        params = tiny_params()
        for name, shape in TINY.shapes().items():
            self.assertEqual(params[name].shape, shape)
            if len(shape) == 1:
                self.assertFalse(np.any(params[name].data))

    def test_init_is_seeded(self):
        """Test equal seeds give equal weights and different seeds differ"""
        np.testing.assert_array_equal(tiny_params(3)['W1'].data, tiny_params(3)['W1'].data)
        self.assertFalse(np.array_equal(tiny_params(3)['W1'].data, tiny_params(4)['W1'].data))

    def test_groups_partition_parameters(self):
        """Test encoder, ssl and policy groups cover every tensor exactly once"""
        params = tiny_params()
        grouped = params.group('encoder') + params.group('ssl') + params.group('policy')
        self.assertEqual(len(grouped), len(params.all()))
        self.assertEqual({id(t) for t in grouped}, {id(t) for t in params.all()})

    def test_wrong_shape_rejected(self):
        """Test from_arrays refuses tensors of the wrong shape"""
        arrays = tiny_params().arrays()
        arrays['W2'] = np.zeros((3, 3))
        with self.assertRaises(IncompatibleArtifactError):
            enc.EncoderParams.from_arrays(TINY, arrays)


class TestHeads(unittest.TestCase):
    """Test the single-observation API"""

    def setUp(self):
        self.params = tiny_params()
        self.obs = tiny_obs()[0]

    def test_encode_and_message(self):
        """Test latents have d_z entries and messages are unit vectors"""
        z = enc.encode(self.obs, self.params)
        self.assertEqual(z.shape, (TINY.latent_dim,))
        m = enc.to_message(z, self.params)
        self.assertAlmostEqual(float(np.linalg.norm(m.data)), 1.0)

    def test_encode_rejects_wrong_size(self):
        """Test an observation of the wrong length raises StructuralError"""
        with self.assertRaises(StructuralError):
            enc.encode(np.zeros(TINY.obs_dim + 1), self.params)

    def test_zero_message_raises(self):
        """Test a zero latent cannot be normalized into a message"""
        with self.assertRaises(DomainError):
            enc.to_message(np.zeros(TINY.latent_dim), self.params)

    def test_attention_respects_mask(self):
        """Test masked candidates get exactly zero weight and the rest sum to one"""
        z = enc.encode(self.obs, self.params)
        alpha, context = enc.task_attention(z, self.obs.candidates, [True, False], self.params)
        np.testing.assert_allclose(alpha.data, [1.0, 0.0])
        self.assertEqual(context.shape, (TINY.latent_dim,))
        expected = self.obs.candidates[0] @ self.params['W_v'].data
        np.testing.assert_allclose(context.data, expected)

    def test_attention_all_masked_raises(self):
        """Test attention with no open candidate raises DomainError"""
        z = enc.encode(self.obs, self.params)
        with self.assertRaises(DomainError):
            enc.task_attention(z, self.obs.candidates, [False, False], self.params)

    def test_policy_masks_with_negative_infinity(self):
        """Test masked slots have -inf logits and zero probability; skip stays finite"""
        z = enc.encode(self.obs, self.params)
        _, c = enc.task_attention(z, self.obs.candidates, [True, False], self.params)
        logits, value = enc.policy_forward(z, c, self.params, mask=[True, False])
        self.assertEqual(logits.shape, (TINY.n_actions,))
        self.assertEqual(logits[1], -np.inf)
        self.assertTrue(np.isfinite(logits[0]) and np.isfinite(logits[2]))
        probs = enc.action_probs(logits)
        self.assertAlmostEqual(probs.sum(), 1.0)
        self.assertEqual(probs[1], 0.0)
        self.assertIsInstance(value, float)
        self.assertIn(enc.greedy_action(logits), (1, 3))

    def test_task_bias_shifts_logits(self):
        """Test the bilinear bias is added to task logits only"""
        z = enc.encode(self.obs, self.params)
        self.params['W_B'].data[...] = 1.0
        _, c = enc.task_attention(z, self.obs.candidates, self.obs.mask, self.params)
        bias = enc.task_bias(z, self.obs.candidates, self.params, beta=0.5)
        plain, _ = enc.policy_forward(z, c, self.params, mask=self.obs.mask)
        biased, _ = enc.policy_forward(z, c, self.params, mask=self.obs.mask, bias=bias)
        np.testing.assert_allclose(biased[:2] - plain[:2], bias.data)
        self.assertAlmostEqual(biased[2], plain[2])

    def test_sample_action_is_seeded(self):
        """Test sampling depends only on the stream"""
        logits = np.array([0.1, 0.5, -np.inf])
        a = [enc.sample_action(logits, nc.Rng(2).child(i)) for i in range(10)]
        b = [enc.sample_action(logits, nc.Rng(2).child(i)) for i in range(10)]
        self.assertEqual(a, b)
        self.assertTrue(all(x in (1, 2) for x in a))


class TestBatchedGraph(unittest.TestCase):
    """Test the differentiable batched forward pass"""

    def test_policy_gradient_check(self):
        """Test gradients of a policy log-likelihood through attention and heads"""
        params = tiny_params()
        observations = tiny_obs(batch=4)
        obs = np.array([o.vector() for o in observations])
        mask = np.array([o.mask for o in observations])
        mask[1, 1] = False
        actions = np.array([0, 2, 1, 2])

        def loss():
            logits, value, _ = enc.act_forward(params, obs, mask, bias_beta=0.5)
            return nc.mean(-nc.pick(nc.log_softmax(logits), actions)) + nc.mean(value * value)

        checked = [params[name] for name in ('W_pi', 'W_q', 'W_k', 'W_v', 'W_B', 'W_val')]
        self.assertLess(nc.gradient_check(loss, checked), 1e-5)

    def test_rows_without_candidates_get_zero_context(self):
        """Test an all-masked row produces zero attention and zero context"""
        params = tiny_params()
        z = nc.Tensor(np.ones((2, TINY.latent_dim)))
        tasks = np.ones((2, 2, 5))
        alpha, context = enc.attention_batch(params, z, tasks, np.array([[True, True], [False, False]]))
        np.testing.assert_array_equal(alpha.data[1], [0.0, 0.0])
        np.testing.assert_array_equal(context.data[1], np.zeros(TINY.latent_dim))
        self.assertAlmostEqual(alpha.data[0].sum(), 1.0)


class TestProtoAffinity(unittest.TestCase):
    """Test the prototype-affinity logit bias"""

    def setUp(self):
        self.params = tiny_params()
        observations = tiny_obs(batch=4)
        self.obs = np.array([o.vector() for o in observations])
        self.mask = np.array([o.mask for o in observations])
        self.prototypes = nc.Rng(7).normal(0.0, 1.0, (3, TINY.message_dim))

    def test_scores_bounded_by_beta(self):
        """Test scores are (B, K) and lie in [0, β]"""
        affinity = enc.ProtoAffinity(self.prototypes, beta=0.7, temperature=0.2)
        _, tasks = enc.split_obs(self.obs, TINY.k_candidates)
        z, _ = enc.encode_batch(self.params, self.obs)
        scores = affinity.scores(self.params, z, tasks)
        self.assertEqual(scores.shape, (4, TINY.k_candidates))
        self.assertTrue(np.all(scores >= 0.0))
        self.assertTrue(np.all(scores <= 0.7 + 1e-12))

    def test_adds_scores_to_task_logits_only(self):
        """Test the affinity shifts unmasked task logits by its scores and leaves skip alone"""
        affinity = enc.ProtoAffinity(self.prototypes, beta=2.0)
        with nc.no_grad():
            plain, _, z = enc.act_forward(self.params, self.obs, self.mask, bias_beta=0.5)
            biased, _, _ = enc.act_forward(self.params, self.obs, self.mask, bias_beta=0.5, affinity=affinity)
        _, tasks = enc.split_obs(self.obs, TINY.k_candidates)
        scores = affinity.scores(self.params, z, tasks)
        shift = biased.data[:, :-1] - plain.data[:, :-1]
        np.testing.assert_allclose(shift[self.mask], scores[self.mask], atol=1e-9)
        np.testing.assert_allclose(biased.data[:, -1], plain.data[:, -1])

    def test_zero_beta_is_inert(self):
        """Test β=0 reproduces the unbiased logits exactly"""
        affinity = enc.ProtoAffinity(self.prototypes, beta=0.0)
        with nc.no_grad():
            plain, _, _ = enc.act_forward(self.params, self.obs, self.mask)
            biased, _, _ = enc.act_forward(self.params, self.obs, self.mask, affinity=affinity)
        np.testing.assert_array_equal(plain.data, biased.data)

    def test_validation(self):
        """Test malformed prototypes and out-of-range settings are rejected"""
        with self.assertRaises(StructuralError):
            enc.ProtoAffinity(self.prototypes[:1]).validate(self.params)
        with self.assertRaises(StructuralError):
            enc.ProtoAffinity(np.ones((3, TINY.message_dim + 1))).validate(self.params)
        with self.assertRaises(DomainError):
            enc.ProtoAffinity(self.prototypes, beta=-1.0).validate(self.params)
        with self.assertRaises(DomainError):
            enc.ProtoAffinity(self.prototypes, temperature=0.0).validate(self.params)


class TestEmaTarget(unittest.TestCase):
    """Test the momentum target"""

    def test_zero_momentum_copies(self):
        """Test μ=0 makes the target equal the online weights"""
        online = tiny_params(0)
        target = enc.EmaTarget(tiny_params(1), momentum=0.0)
        enc.ema_update(online, target)
        for name in online.names():
            np.testing.assert_array_equal(target.params[name].data, online[name].data)

    def test_interpolation(self):
        """Test θ_EMA ← μ θ_EMA + (1-μ) θ"""
        online = tiny_params(0)
        start = tiny_params(1)
        target = enc.EmaTarget(start, momentum=0.75)
        target.update(online)
        expected = 0.75 * start['W1'].data + 0.25 * online['W1'].data
        np.testing.assert_allclose(target.params['W1'].data, expected)

    def test_fixed_point(self):
        """Test a target equal to the online weights does not drift"""
        online = tiny_params(0)
        target = enc.EmaTarget(online, momentum=0.996)
        for _ in range(5):
            target.update(online)
        np.testing.assert_array_equal(target.params['W2'].data, online['W2'].data)

    def test_target_is_detached(self):
        """Test target tensors never require grad and are independent copies"""
        online = tiny_params(0)
        target = enc.EmaTarget(online)
        self.assertFalse(any(t.requires_grad for t in target.params.all()))
        online['W1'].data[0, 0] += 1.0
        self.assertNotEqual(online['W1'].data[0, 0], target.params['W1'].data[0, 0])

    def test_invalid_momentum(self):
        """Test μ outside [0, 1) raises DomainError"""
        with self.assertRaises(DomainError):
            enc.EmaTarget(tiny_params(), momentum=1.0)


class TestCheckpoints(unittest.TestCase):
    """Test checkpoint files"""

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmpdir.name, "ckpt.json")

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_restore_model(self):
        """Test online, EMA and prototypes come back from a saved checkpoint"""
        online = tiny_params(0)
        target = enc.EmaTarget(tiny_params(1))
        prototypes = np.eye(3, TINY.message_dim)
        enc.save_checkpoint(self.path, enc.model_arrays(online, target, prototypes), {'seed': 0})
        arrays, meta = enc.load_checkpoint(self.path)
        restored, ema, protos = enc.restore_model(TINY, arrays)
        self.assertEqual(meta, {'seed': 0})
        np.testing.assert_array_equal(restored['W_pi'].data, online['W_pi'].data)
        np.testing.assert_array_equal(ema.params['W1'].data, target.params['W1'].data)
        np.testing.assert_array_equal(protos, prototypes)

    def test_same_tensors_same_bytes(self):
        """Test writing the same state twice gives identical files"""
        arrays = enc.model_arrays(tiny_params(0))
        other = os.path.join(self.tmpdir.name, "again.json")
        enc.save_checkpoint(self.path, arrays)
        enc.save_checkpoint(other, arrays)
        with open(self.path, 'rb') as a, open(other, 'rb') as b:
            self.assertEqual(a.read(), b.read())

    def test_missing_checkpoint(self):
        """Test loading a missing file raises MissingArtifactError"""
        with self.assertRaises(MissingArtifactError):
            enc.load_checkpoint(self.path)

    def test_wrong_format(self):
        """Test a foreign JSON file raises IncompatibleArtifactError"""
        with open(self.path, 'w') as f:
            json.dump({'format': 'other', 'tensors': {}}, f)
        with self.assertRaises(IncompatibleArtifactError):
            enc.load_checkpoint(self.path)

    def test_dimension_mismatch(self):
        """Test restoring into a different latent size raises IncompatibleArtifactError"""
        enc.save_checkpoint(self.path, enc.model_arrays(tiny_params(0)))
        arrays, _ = enc.load_checkpoint(self.path)
        bigger = enc.EncoderConfig(k_candidates=2, hidden_dim=8, latent_dim=7, message_dim=4, attention_dim=3)
        with self.assertRaises(IncompatibleArtifactError):
            enc.restore_model(bigger, arrays)


if __name__ == '__main__':
    unittest.main()
