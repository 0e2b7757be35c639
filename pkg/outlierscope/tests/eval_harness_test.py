import json
import math
import os
import shutil
import tempfile
import unittest

import torch

from outlierscope.eval_harness import (LOCAL_TEXT, EvalConfig, evaluate_ppl,
                                       sample_corpus, samples_digest,
                                       sequence_nll)
from outlierscope.interventions import (REPLACE_WITH_ZERO, TAP,
                                        InterventionPlan,
                                        plan_tma_removal,
                                        plan_weight_ablation, plans_digest)
from outlierscope.model_adapter import build_toy_model
from outlierscope.taps import GATED_MLP
from outlierscope.tests.model_test_utils import (random_tokens,
                                                 write_token_corpus)
from outlierscope.utils import CorpusError, PlanError


class SampleCorpusTest(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.corpus = write_token_corpus(
            os.path.join(self.tmpdir, 'tokens.jsonl'))
        self.config = EvalConfig(LOCAL_TEXT, sample_count=3,
                                 sequence_length=16)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_windows(self):
        samples = sample_corpus(self.config, self.corpus)
        self.assertEqual(len(samples), 3)
        stream = []
        with open(self.corpus) as f:
            for line in f:
                stream.extend(json.loads(line)['input_ids'])
        starts = [s * 16 for s in range(10)]
        windows = [stream[s:s + 16] for s in starts]
        for sample in samples:
            self.assertEqual(len(sample), 16)
            self.assertIn(sample, windows)
        self.assertEqual(len({tuple(s) for s in samples}), 3)

    def test_seeded(self):
        first = sample_corpus(self.config, self.corpus)
        again = sample_corpus(self.config, self.corpus)
        self.assertEqual(samples_digest(first), samples_digest(again))

    def test_too_few_windows(self):
        config = EvalConfig(LOCAL_TEXT, sample_count=11, sequence_length=16)
        with self.assertRaises(CorpusError):
            sample_corpus(config, self.corpus)
        # 160 tokens hold exactly ten windows of 16.
        self.assertEqual(len(sample_corpus(
            EvalConfig(LOCAL_TEXT, sample_count=10, sequence_length=16),
            self.corpus)), 10)

    def test_text_corpus(self):
        path = os.path.join(self.tmpdir, 'corpus.txt')
        with open(path, 'w') as f:
            f.write('massive activations ' * 10)
        with self.assertRaises(CorpusError):
            sample_corpus(self.config, path)

        samples = sample_corpus(self.config, path,
                                encode=lambda text: [ord(c) % 64
                                                     for c in text])
        self.assertEqual([len(s) for s in samples], [16, 16, 16])

    def test_bad_corpora(self):
        with self.assertRaises(CorpusError):
            sample_corpus(self.config)
        with self.assertRaises(CorpusError):
            sample_corpus(self.config, os.path.join(self.tmpdir, 'absent'))
        mixed = os.path.join(self.tmpdir, 'mixed.jsonl')
        with open(mixed, 'w') as f:
            f.write('{"text": "a"}\n{"input_ids": [1, 2]}\n')
        with self.assertRaises(CorpusError):
            sample_corpus(self.config, mixed)

    def test_config(self):
        self.assertEqual(EvalConfig().stride, EvalConfig().sequence_length)
        with self.assertRaises(ValueError):
            EvalConfig('pile')
        with self.assertRaises(ValueError):
            EvalConfig(sequence_length=1)
        model = build_toy_model(GATED_MLP)
        with self.assertRaises(CorpusError):
            EvalConfig(sequence_length=65).check_model(model.descriptor)


class EvaluatePplTest(unittest.TestCase):

    def setUp(self):
        self.model = build_toy_model(GATED_MLP, layer_count=2)
        self.samples = [random_tokens(12, seed=s) for s in range(4)]

    def test_uniform_model(self):
        model = build_toy_model(GATED_MLP, zero=True)
        result = evaluate_ppl(model, self.samples)
        self.assertAlmostEqual(result.perplexity, 64.0, places=9)
        self.assertEqual(result.token_count, 4 * 11)
        self.assertEqual(result.sample_count, 4)
        self.assertEqual(result.plan_digest, 'baseline')
        self.assertFalse(result.diverged)

    def test_nll_matches_perplexity(self):
        total = 0.0
        count = 0
        for sample in self.samples:
            nll, scored = sequence_nll(self.model, sample)
            total += nll
            count += scored
        result = evaluate_ppl(self.model, self.samples)
        self.assertAlmostEqual(result.perplexity, math.exp(total / count),
                               places=9)

    def test_deterministic(self):
        first = evaluate_ppl(self.model, self.samples)
        second = evaluate_ppl(self.model, self.samples)
        self.assertEqual(first, second)

    def test_plans_change_perplexity(self):
        plan = plan_weight_ablation('down_proj', [0, 3], 'zero')
        baseline = evaluate_ppl(self.model, self.samples)
        ablated = evaluate_ppl(self.model, self.samples, plan)
        self.assertNotEqual(baseline.perplexity, ablated.perplexity)
        self.assertEqual(ablated.plan_digest, plans_digest([plan]))
        again = evaluate_ppl(self.model, self.samples)
        self.assertEqual(baseline.perplexity, again.perplexity)

    def test_parallel_workers(self):
        plan = plan_weight_ablation('q_proj', [1], 'mean')
        serial = evaluate_ppl(self.model, self.samples, plan)
        parallel = evaluate_ppl(self.model, self.samples, plan, workers=2)
        # Workers score with one intra-op thread each.
        self.assertLess(abs(serial.perplexity - parallel.perplexity),
                        1e-6 * serial.perplexity)
        self.assertEqual(serial.token_count, parallel.token_count)

    def test_tap_plans_score_serially(self):
        plan = plan_tma_removal('y6', 'mean')
        serial = evaluate_ppl(self.model, self.samples, plan)
        requested = evaluate_ppl(self.model, self.samples, plan, workers=2)
        self.assertEqual(serial.perplexity, requested.perplexity)

    def test_divergence(self):
        lm_head = self.model.params['lm_head']
        self.model.params['lm_head'] = torch.full_like(lm_head,
                                                       float('nan'))
        result = evaluate_ppl(self.model, self.samples)
        self.assertTrue(result.diverged)
        self.assertFalse(math.isfinite(result.perplexity))

    def test_bad_inputs(self):
        with self.assertRaises(CorpusError):
            evaluate_ppl(self.model, [])
        plan = InterventionPlan(TAP, REPLACE_WITH_ZERO,
                                indices=((0, 20, 0),), slot='x1')
        with self.assertRaises(PlanError):
            evaluate_ppl(self.model, self.samples, plan)

    def test_result_dict(self):
        config = EvalConfig(LOCAL_TEXT, sample_count=4, sequence_length=12)
        result = evaluate_ppl(self.model, self.samples, config=config)
        data = result.to_dict()
        self.assertEqual(data['config']['sequence_length'], 12)
        self.assertEqual(data['config']['stride'], 12)
        self.assertNotIn('elapsed', data)
