import unittest

import numpy as np

from outlierscope.ma_analysis import (FAKE_MA, NOT_AVAILABLE, TRUE_MA,
                                      TrendConfig, build_ma_profile,
                                      classify_pass, classify_tma_fma,
                                      detect_mas, extreme_layer_rows,
                                      find_birthplace, ma_mask,
                                      profile_sublayers,
                                      top_k_entries, trend_analysis)
from outlierscope.model_adapter import build_toy_model
from outlierscope.taps import GATED_MLP, STANDARD_MLP
from outlierscope.tests.model_test_utils import (make_snapshot,
                                                 plant_embedding_ma,
                                                 random_tokens)
from outlierscope.utils import (EmptyTensorError, NonFiniteActivationError,
                                ProvenanceError)


def filled(value, shape=(8, 8)):
    return np.full(shape, value, dtype=np.float32)


def layer_snapshots(planted, layer_count, shape=(4, 8), pass_id='pass-0',
                    input_digest='input-0'):
    """One x1 snapshot per layer with {layer: {(t, c): value}} planted."""
    snapshots = []
    for layer_index in range(layer_count):
        values = filled(0.01, shape)
        for (t, c), value in planted.get(layer_index, {}).items():
            values[t, c] = value
        snapshots.append(make_snapshot(values, layer_index=layer_index,
                                       pass_id=pass_id,
                                       input_digest=input_digest))
    return snapshots


def median_of(values):
    magnitudes = sorted(abs(float(v)) for v in np.asarray(values).ravel())
    middle = len(magnitudes) // 2
    if len(magnitudes) % 2:
        return magnitudes[middle]
    return (magnitudes[middle - 1] + magnitudes[middle]) / 2


class DetectTest(unittest.TestCase):

    def test_matches_direct_definition(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((16, 32)).astype(np.float32) * 0.01
        values[2, 3] = 500.0
        values[5, 7] = -800.0

        median = median_of(values)
        expected = [(t, c) for t in range(16) for c in range(32)
                    if abs(values[t, c]) > 100.0 and
                    abs(values[t, c]) >= 1000.0 * median]

        events = detect_mas(make_snapshot(values))
        self.assertEqual([e.position for e in events], expected)
        self.assertEqual(expected, [(2, 3), (5, 7)])
        self.assertEqual(events[1].value, -800.0)

    def test_absolute_threshold_is_strict(self):
        values = filled(0.0625)
        values[0, 0] = 100.0
        self.assertFalse(ma_mask(values).any())
        values[0, 0] = 100.5
        self.assertTrue(ma_mask(values)[0, 0])

    def test_median_ratio_is_inclusive(self):
        values = filled(0.25)
        values[3, 4] = 250.0
        self.assertTrue(ma_mask(values)[3, 4])
        values[3, 4] = 249.5
        self.assertFalse(ma_mask(values).any())

    def test_negative_values(self):
        values = filled(0.0625)
        values[1, 1] = -300.0
        events = detect_mas(make_snapshot(values))
        self.assertEqual([(e.position, e.value) for e in events],
                         [((1, 1), -300.0)])

    def test_zeroed_tensor_has_no_mas(self):
        values = filled(0.0625)
        values[2, 6] = 700.0
        self.assertEqual(len(detect_mas(make_snapshot(values))), 1)
        self.assertEqual(detect_mas(make_snapshot(values * 0.0)), [])

    def test_no_mas_in_flat_tensor(self):
        self.assertEqual(detect_mas(make_snapshot(filled(500.0))), [])

    def test_rejects_bad_tensors(self):
        with self.assertRaises(EmptyTensorError):
            detect_mas(make_snapshot(np.zeros((0, 8))))
        values = filled(0.1)
        values[0, 1] = np.nan
        with self.assertRaises(NonFiniteActivationError):
            detect_mas(make_snapshot(values))

    def test_top_k_keeps_signs(self):
        values = filled(0.0)
        values[0, 2] = 3.0
        values[1, 0] = -7.0
        values[2, 5] = 5.0
        entries = top_k_entries(make_snapshot(values), 2)
        self.assertEqual([(e.value, e.token_index, e.channel_index)
                          for e in entries], [(-7.0, 1, 0), (5.0, 2, 5)])
        with self.assertRaises(ValueError):
            top_k_entries(make_snapshot(values), 0)


class ProfileTest(unittest.TestCase):

    def test_layers_keep_top_k(self):
        planted = {0: {(0, 1): 300.0, (1, 2): -900.0, (2, 3): 600.0},
                   1: {}}
        profile = build_ma_profile(layer_snapshots(planted, 2), k=2)
        self.assertEqual(profile.layer_indices, (0, 1))
        self.assertEqual([e.value for e in profile.layers[0]],
                         [-900.0, 600.0])
        self.assertEqual(len(profile.detected[0]), 3)
        self.assertEqual(profile.layers[1], ())
        self.assertEqual(profile.counts()['unclassified'], 3)

    def test_mixed_passes_rejected(self):
        snapshots = (layer_snapshots({}, 1, pass_id='a') +
                     [make_snapshot(filled(0.0, (4, 8)), layer_index=1,
                                    pass_id='b')])
        with self.assertRaises(ProvenanceError):
            build_ma_profile(snapshots)
        with self.assertRaises(ProvenanceError):
            build_ma_profile([])


class ClassifyTest(unittest.TestCase):

    def test_partition(self):
        baseline = build_ma_profile(layer_snapshots(
            {0: {(0, 1): 500.0}, 1: {(0, 1): 520.0, (3, 6): -400.0}}, 2))
        stripped = build_ma_profile(layer_snapshots(
            {0: {(0, 1): 500.0}, 1: {(3, 6): -390.0}}, 2,
            pass_id='pass-1'))

        classified = classify_tma_fma(baseline, stripped)
        kinds = {(e.tap.layer_index, e.position): e.kind
                 for i in classified.layer_indices
                 for e in classified.detected[i]}
        self.assertEqual(kinds, {(0, (0, 1)): TRUE_MA,
                                 (1, (0, 1)): FAKE_MA,
                                 (1, (3, 6)): TRUE_MA})
        counts = classified.counts()
        self.assertEqual(counts[TRUE_MA] + counts[FAKE_MA], 3)
        self.assertEqual(counts['unclassified'], 0)

    def test_inputs_must_match(self):
        baseline = build_ma_profile(layer_snapshots({}, 2))
        other = build_ma_profile(layer_snapshots({}, 2,
                                                 input_digest='input-1'))
        with self.assertRaises(ProvenanceError):
            classify_tma_fma(baseline, other)

    def test_planted_embedding_ma(self):
        model = plant_embedding_ma(build_toy_model(GATED_MLP, layer_count=2))
        tokens = [5, 0, 9, 11, 3, 7, 1, 2]

        classified = classify_pass(model, tokens)
        first = [e for e in classified.detected[0] if e.position == (1, 2)]
        later = [e for e in classified.detected[1] if e.position == (1, 2)]
        self.assertEqual([e.kind for e in first], [TRUE_MA])
        self.assertEqual([e.kind for e in later], [FAKE_MA])

        birthplace = find_birthplace(model, tokens)
        self.assertEqual((birthplace.layer_index, birthplace.slot),
                         (0, 'x1'))
        self.assertEqual(birthplace.event.position, (1, 2))

    def test_no_birthplace(self):
        model = build_toy_model(GATED_MLP, layer_count=2)
        self.assertIsNone(find_birthplace(model, random_tokens(8)))


class TrendTest(unittest.TestCase):

    def setUp(self):
        self.profile = build_ma_profile(layer_snapshots(
            {0: {(0, 5): 500.0},
             2: {(1, 1): 450.0},
             3: {(0, 5): -600.0}}, 4))

    def test_windows(self):
        self.assertEqual(TrendConfig().windows(4), ((0,), (2, 3)))
        self.assertEqual(TrendConfig().windows(32),
                         (tuple(range(8)), (30, 31)))
        self.assertEqual(TrendConfig().windows(2), ((0,), (1,)))
        with self.assertRaises(ValueError):
            TrendConfig(initial_fraction=0.0)

    def test_sign_flip(self):
        report = trend_analysis(self.profile)
        self.assertEqual(len(report.records), 1)
        record = report.records[0]
        self.assertEqual((record.token_index, record.channel_index),
                         (0, 5))
        self.assertEqual((record.initial_layer, record.final_layer), (0, 3))
        self.assertTrue(record.sign_flipped)
        self.assertEqual(report.flipped_count, 1)

    def test_fake_mas_ignored(self):
        stripped = build_ma_profile(layer_snapshots(
            {0: {(0, 5): 500.0}, 2: {(1, 1): 450.0}}, 4, pass_id='pass-1'))
        report = trend_analysis(classify_tma_fma(self.profile, stripped))
        self.assertEqual(report.records, ())

    def test_single_layer(self):
        profile = build_ma_profile(layer_snapshots({0: {(0, 0): 800.0}}, 1))
        self.assertEqual(trend_analysis(profile).records, ())

    def test_needs_every_layer(self):
        snapshots = layer_snapshots({}, 3)
        with self.assertRaises(ProvenanceError):
            trend_analysis(build_ma_profile(snapshots[1:]))

    def test_extreme_layers(self):
        rows = {r['row']: r for r in extreme_layer_rows(self.profile)}
        self.assertEqual(list(rows), ['initial_top1', 'initial_top2',
                                      'last2_top1', 'last2_top2',
                                      'last1_top1', 'last1_top2'])
        self.assertEqual(rows['initial_top1']['value'], 500.0)
        self.assertEqual(rows['initial_top2']['value'], NOT_AVAILABLE)
        self.assertEqual(rows['last2_top1']['layer'], 2)
        self.assertEqual(rows['last1_top1']['value'], -600.0)
        self.assertEqual(rows['last1_top1']['channel_index'], 5)

    def test_extreme_layers_short_model(self):
        profile = build_ma_profile(layer_snapshots({0: {(0, 0): 800.0}}, 1))
        rows = {r['row']: r for r in extreme_layer_rows(profile)}
        self.assertEqual(rows['initial_top1']['value'], 800.0)
        for name in ('last2_top1', 'last1_top1', 'last1_top2'):
            self.assertEqual(rows[name]['layer'], NOT_AVAILABLE)


class SublayerTest(unittest.TestCase):

    def test_standard_mlp_notes(self):
        model = build_toy_model(STANDARD_MLP, layer_count=2)
        table = profile_sublayers(model, random_tokens(8), 1, k=2)
        slots = [slot for slot, _ in table.rows]
        self.assertNotIn('y5', slots)
        self.assertNotIn('y6', slots)
        self.assertEqual(set(table.notes), {'y5', 'y6'})
        self.assertEqual(len(table.values('y4')), 2)
        with self.assertRaises(KeyError):
            table.values('y5')
        noted = [r for r in table.to_records() if r['note']]
        self.assertEqual(len(noted), 2)

    def test_gated_has_every_slot(self):
        model = build_toy_model(GATED_MLP, layer_count=2)
        table = profile_sublayers(model, random_tokens(8), 0)
        self.assertEqual(len(table.rows), 16)
        self.assertEqual(table.notes, {})


class OracleTest(unittest.TestCase):
    """detect_mas against a per-entry loop over 1,000 planted tensors."""

    def oracle(self, values):
        rows = values.tolist()
        median = median_of(values)
        return [(t, c) for t, row in enumerate(rows)
                for c, value in enumerate(row)
                if abs(value) > 100.0 and abs(value) >= 1000.0 * median]

    def test_random_tensors(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            shape = tuple(rng.integers(1, 65, size=2))
            values = rng.uniform(-1, 1, size=shape).astype(np.float32)
            for _ in range(rng.integers(0, 4)):
                t, c = rng.integers(0, shape[0]), rng.integers(0, shape[1])
                values[t, c] = rng.choice([-1, 1]) * rng.uniform(50, 2000)
            events = detect_mas(make_snapshot(values))
            self.assertEqual([e.position for e in events],
                             self.oracle(values))
