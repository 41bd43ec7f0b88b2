"""
Unit tests for main.py
Tests the command-line pipeline, exit codes and manifest-based resumption
"""
import csv
import os
import tempfile
import unittest
from unittest.mock import patch

import config
import main
import warehouse_env as wenv

TINY_YAML = """\
seed: 3
environment:
  width: 5
  height: 5
  n_agents: 2
  k_candidates: 2
  episode_length: 6
  task_pool_size: 4
  collect_episodes: 2
  collect_steps: 20
encoder:
  hidden_dim: 8
  latent_dim: 6
  message_dim: 4
  attention_dim: 3
ssl:
  queue_capacity: 32
  n_prototypes: 3
  epochs: 1
  batch_groups: 4
  horizon: 2
  log_every: 0
trainer:
  iterations: 2
  epochs: 1
  steps_per_iter: 6
  minibatch: 8
  aux_batch: 4
eval:
  episodes: 2
  collect_episodes: 2
"""


class CliTestCase(unittest.TestCase):
    """Shared temp workspace with a tiny run config"""

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.run_dir = os.path.join(self.tmpdir.name, "run")
        self.config_path = self.write_config("tiny.yaml", TINY_YAML)

    def tearDown(self):
        self.tmpdir.cleanup()

    def write_config(self, name, text):
        path = os.path.join(self.tmpdir.name, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path

    def cli(self, command, *extra, config_path=None):
        return main.main([command, '--config', config_path or self.config_path, '--out', self.run_dir, *extra])

    def artifact(self, name):
        return os.path.join(self.run_dir, name)


class TestExitCodes(CliTestCase):
    """Test process exit codes"""

    def test_no_command_prints_menu(self):
        """Test running without a command shows the banner and succeeds"""
        self.assertEqual(main.main([]), main.EXIT_OK)

    def test_bad_config_key(self):
        """Test an unknown config key exits with the config error code"""
        bad = self.write_config("bad.yaml", "ssl:\n  foo: 1\n")
        self.assertEqual(self.cli('collect', config_path=bad), main.EXIT_CONFIG)

    def test_missing_buffer(self):
        """Test pretraining without a collected buffer exits with the missing-artifact code"""
        self.assertEqual(self.cli('pretrain'), main.EXIT_MISSING)

    def test_missing_checkpoint(self):
        """Test evaluating without any checkpoint exits with the missing-artifact code"""
        self.assertEqual(self.cli('evaluate'), main.EXIT_MISSING)

    def test_incompatible_checkpoint(self):
        """Test a checkpoint built with other dimensions exits with the incompatible-artifact code"""
        self.assertEqual(self.cli('collect'), main.EXIT_OK)
        self.assertEqual(self.cli('pretrain'), main.EXIT_OK)
        wider = self.write_config("wider.yaml", TINY_YAML.replace("latent_dim: 6", "latent_dim: 7"))
        checkpoint = self.artifact(config.PRETRAIN_CHECKPOINT_FILE)
        self.assertEqual(self.cli('finetune', '--checkpoint', checkpoint, config_path=wider),
                         main.EXIT_INCOMPATIBLE)


class TestPipeline(CliTestCase):
    """Test collect -> pretrain -> finetune -> evaluate on a tiny warehouse"""

    @patch('evalmetrics.probe_accuracy', return_value=0.5)
    def test_ablated_pipeline(self, _probe):
        """Test every stage writes its artifacts and the ablated term stays zero"""
        for command in ('collect', 'pretrain', 'finetune', 'evaluate'):
            self.assertEqual(self.cli(command, '--ablate', 'no_proto'), main.EXIT_OK, command)

        for name in (config.BUFFER_FILE, config.PRETRAIN_CHECKPOINT_FILE, config.PRETRAIN_LOSS_FILE,
                     config.FINETUNE_CHECKPOINT_FILE, config.FINETUNE_REPORT_CSV, config.METRICS_JSON_FILE,
                     config.METRICS_CSV_FILE, config.KPI_CSV_FILE, config.MANIFEST_FILE, "config.yaml"):
            self.assertTrue(os.path.exists(self.artifact(name)), name)

        with open(self.artifact(config.PRETRAIN_LOSS_FILE), newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 10)
        self.assertTrue(all(float(row['L_Proto']) == 0.0 for row in rows))
        self.assertTrue(all(float(row['L_X']) != 0.0 for row in rows))

        with open(self.artifact(config.METRICS_CSV_FILE), newline='', encoding='utf-8') as f:
            metrics = list(csv.DictReader(f))
        self.assertEqual(metrics[0]['Method'], main.ABLATION_LABELS['no_proto'])

    @patch('evalmetrics.probe_accuracy', return_value=0.5)
    def test_forced_evaluation_is_reproducible(self, _probe):
        """Test re-evaluating the same checkpoint gives byte-identical metrics"""
        for command in ('collect', 'pretrain'):
            self.assertEqual(self.cli(command), main.EXIT_OK)
        self.assertEqual(self.cli('evaluate'), main.EXIT_OK)
        with open(self.artifact(config.METRICS_JSON_FILE), 'rb') as f:
            first = f.read()
        self.assertEqual(self.cli('evaluate', '--force'), main.EXIT_OK)
        with open(self.artifact(config.METRICS_JSON_FILE), 'rb') as f:
            self.assertEqual(f.read(), first)

    def test_from_scratch_outputs(self):
        """Test scratch fine-tuning needs no checkpoint and writes prefixed files"""
        self.assertEqual(self.cli('finetune', '--from-scratch'), main.EXIT_OK)
        self.assertTrue(os.path.exists(self.artifact("scratch_" + config.FINETUNE_CHECKPOINT_FILE)))
        self.assertFalse(os.path.exists(self.artifact(config.FINETUNE_CHECKPOINT_FILE)))

    def test_completed_command_is_skipped(self):
        """Test a second collect with the same config reuses the manifest entry"""
        with patch.object(wenv, 'collect_heuristic_dataset', wraps=wenv.collect_heuristic_dataset) as spy:
            self.assertEqual(self.cli('collect'), main.EXIT_OK)
            self.assertEqual(self.cli('collect'), main.EXIT_OK)
            self.assertEqual(spy.call_count, 1)
            self.assertEqual(self.cli('collect', '--force'), main.EXIT_OK)
            self.assertEqual(spy.call_count, 2)
            self.assertEqual(self.cli('collect', '--seed', '4'), main.EXIT_OK)
            self.assertEqual(spy.call_count, 3)


class TestTables(unittest.TestCase):
    """Test method labels and seed aggregation"""

    def test_method_names(self):
        """Test the full model and ablated variants get table labels"""
        self.assertEqual(main.method_name([]), 'SCALE-COMM (full)')
        self.assertEqual(main.method_name(['no_curriculum']), 'w/o Curriculum Scheduling')

    def test_aggregate_rows(self):
        """Test one seed keeps numbers and several seeds give mean ± SD"""
        rows = {
            'A': [{'Method': 'A', 'R@1': 0.5}],
            'B': [{'Method': 'B', 'R@1': 0.2}, {'Method': 'B', 'R@1': 0.4}],
        }
        table = main.aggregate_rows(rows, ['Method', 'R@1'])
        self.assertEqual(table[0], {'Method': 'A', 'R@1': 0.5})
        self.assertEqual(table[1]['R@1'], "0.300 ± 0.100")


if __name__ == '__main__':
    unittest.main()
