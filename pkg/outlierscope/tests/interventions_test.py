import unittest

import torch

from outlierscope.co_analysis import OtcSet
from outlierscope.interventions import (GAMMA, PER_CHANNEL, REPLACE_WITH_MEAN,
                                        REPLACE_WITH_ZERO, TAP, WEIGHT,
                                        InterventionPlan, apply_plan,
                                        apply_plans, channel_ablation_plans,
                                        otc_plans, plan_from_json,
                                        plan_gamma_edit, plan_to_json,
                                        plan_tma_removal,
                                        plan_weight_ablation, plans_digest,
                                        random_baseline, revert_plan,
                                        sample_random_channels)
from outlierscope.ma_analysis import MassiveActivationEvent, detect_mas
from outlierscope.model_adapter import build_toy_model, run_with_taps
from outlierscope.taps import (FFN, GATED_MLP, SELF_ATTENTION, STANDARD_MLP,
                               TapPoint)
from outlierscope.tests.model_test_utils import (plant_embedding_ma,
                                                 random_tokens)
from outlierscope.utils import PlanError


class ParameterPlanTest(unittest.TestCase):

    def setUp(self):
        self.model = build_toy_model(GATED_MLP, layer_count=2)
        self.tokens = random_tokens(8)

    def test_revert_is_exact(self):
        name = 'layers.1.q_proj.weight'
        original = self.model.parameter(name)
        other = self.model.parameter('layers.0.q_proj.weight')
        plan = plan_weight_ablation('layers.1.q_proj', [1, 3], 'zero')

        originals = apply_plan(self.model, plan)
        edited = self.model.parameter(name)
        self.assertEqual(float(edited[[1, 3]].abs().max()), 0.0)
        self.assertTrue(torch.equal(edited[0], original[0]))
        self.assertIs(self.model.parameter('layers.0.q_proj.weight'), other)

        revert_plan(self.model, plan, originals)
        self.assertIs(self.model.parameter(name), original)

    def test_restored_when_block_raises(self):
        plan = plan_gamma_edit(None, FFN, [2], 'zero')
        before = dict(self.model.params)
        with self.assertRaises(RuntimeError):
            with apply_plans(self.model, [plan]):
                self.assertEqual(float(self.model.parameter(
                    'layers.0.ffn_norm.weight')[2]), 0.0)
                raise RuntimeError('boom')
        for name, tensor in before.items():
            self.assertIs(self.model.params[name], tensor)

    def test_passes_are_repeatable(self):
        plan = plan_weight_ablation('down_proj', [0, 4], 'mean')
        baseline, _ = self.model.run(self.tokens)
        first, _ = self.model.run(self.tokens, plans=[plan])
        second, _ = self.model.run(self.tokens, plans=[plan])
        after, _ = self.model.run(self.tokens)
        self.assertTrue(torch.equal(first, second))
        self.assertTrue(torch.equal(baseline, after))
        self.assertFalse(torch.equal(baseline, first))

    def test_mean_policies(self):
        name = 'layers.0.attn_norm.weight'
        gamma = self.model.parameter(name)
        with apply_plans(self.model, [plan_gamma_edit(0, SELF_ATTENTION,
                                                      [1, 5], 'mean')]):
            edited = self.model.parameter(name)
            expected = float(gamma.double().mean())
            self.assertAlmostEqual(float(edited[1]), expected, places=6)
            self.assertAlmostEqual(float(edited[5]), expected, places=6)

        name = 'layers.0.k_proj.weight'
        weight = self.model.parameter(name)
        plan = plan_weight_ablation('k_proj', [2], 'mean', layer=0,
                                    mean_scope=PER_CHANNEL)
        with apply_plans(self.model, [plan]):
            row = self.model.parameter(name)[2]
            self.assertTrue(torch.allclose(
                row, torch.full_like(row, float(weight[2].double().mean()))))

    def test_tap_plans_are_not_applied_directly(self):
        plan = plan_tma_removal('y6', 'zero')
        with self.assertRaises(PlanError):
            apply_plan(self.model, plan)


class TapPlanTest(unittest.TestCase):

    def setUp(self):
        self.model = build_toy_model(GATED_MLP, layer_count=2)
        self.tokens = random_tokens(8)
        self.taps = [TapPoint.of('x1', 0)]

    def edited_x1(self, **kwargs):
        _, base = self.model.run(self.tokens, taps=self.taps)
        plan = InterventionPlan(TAP, REPLACE_WITH_MEAN,
                                indices=((0, 2, 5),), slot='x1', **kwargs)
        _, edited = run_with_taps(self.model, self.tokens, self.taps, plan)
        return base[0].values, edited[0].values

    def test_whole_tensor_mean(self):
        base, edited = self.edited_x1()
        self.assertAlmostEqual(float(edited[2, 5]),
                               float(base.double().mean()), places=6)
        edited[2, 5] = base[2, 5]
        self.assertTrue(torch.equal(base, edited))

    def test_mean_without_edited_entries(self):
        base, edited = self.edited_x1(exclude_from_mean=True)
        keep = torch.ones_like(base, dtype=torch.bool)
        keep[2, 5] = False
        self.assertAlmostEqual(float(edited[2, 5]),
                               float(base.double()[keep].mean()), places=6)

    def test_channel_mean(self):
        base, edited = self.edited_x1(mean_scope=PER_CHANNEL)
        self.assertAlmostEqual(float(edited[2, 5]),
                               float(base[:, 5].double().mean()), places=6)

    def test_rematerialized_plan_without_mas(self):
        baseline, _ = self.model.run(self.tokens)
        removed, _ = self.model.run(self.tokens,
                                    plans=[plan_tma_removal('y6', 'mean')])
        self.assertTrue(torch.equal(baseline, removed))

    def test_rematerialized_plan_removes_mas(self):
        model = plant_embedding_ma(build_toy_model(GATED_MLP))
        tokens = [5, 0, 9, 11, 3, 7, 1, 2]
        plan = InterventionPlan(TAP, REPLACE_WITH_ZERO, slot='x1',
                                rematerialize=True, layers=(0,))
        _, base = model.run(tokens, taps=self.taps)
        _, edited = model.run(tokens, taps=self.taps, plans=[plan])
        self.assertEqual([e.position for e in detect_mas(base[0])], [(1, 2)])
        self.assertEqual(detect_mas(edited[0]), [])
        self.assertEqual(float(edited[0].values[1, 2]), 0.0)

    def test_tma_removal_from_events(self):
        model = plant_embedding_ma(build_toy_model(GATED_MLP))
        _, snapshots = model.run([5, 0, 9], taps=self.taps)
        events = detect_mas(snapshots[0])
        with self.assertRaises(PlanError):
            plan_tma_removal('y7', 'zero', events)
        with self.assertRaises(PlanError):
            plan_tma_removal('x1', 'zero')

        y7 = [MassiveActivationEvent(TapPoint.of('y7', 1), 0, 3, 500.0),
              MassiveActivationEvent(TapPoint.of('y7', 0), 2, 1, -400.0),
              MassiveActivationEvent(TapPoint.of('y7', 1), 0, 3, 500.0)]
        plan = plan_tma_removal('y7', 'zero', y7)
        self.assertEqual(plan.indices, ((0, 2, 1), (1, 0, 3)))
        self.assertFalse(plan.rematerialize)
        self.assertEqual(plan.describe(), 'tma-y7-replace_with_zero')


class ValidationTest(unittest.TestCase):

    def setUp(self):
        self.gated = build_toy_model(GATED_MLP, layer_count=2).descriptor
        self.standard = build_toy_model(STANDARD_MLP,
                                        layer_count=2).descriptor

    def test_construction(self):
        with self.assertRaises(PlanError):
            InterventionPlan('bias', REPLACE_WITH_ZERO)
        with self.assertRaises(PlanError):
            InterventionPlan(WEIGHT, 'median', weight_name='q_proj')
        with self.assertRaises(PlanError):
            InterventionPlan(WEIGHT, REPLACE_WITH_ZERO, indices=(1, 1),
                             weight_name='q_proj')
        with self.assertRaises(PlanError):
            InterventionPlan(TAP, REPLACE_WITH_ZERO, indices=((0, 1),),
                             slot='x1')
        with self.assertRaises(PlanError):
            InterventionPlan(TAP, REPLACE_WITH_ZERO, indices=((0, 1, 2),),
                             slot='x1', rematerialize=True)
        with self.assertRaises(PlanError):
            InterventionPlan(GAMMA, REPLACE_WITH_ZERO, indices=(1,))
        with self.assertRaises(PlanError):
            InterventionPlan(WEIGHT, REPLACE_WITH_ZERO, indices=(1,))
        with self.assertRaises(PlanError):
            InterventionPlan(WEIGHT, REPLACE_WITH_ZERO, indices=(-1,),
                             weight_name='q_proj')

    def test_against_model(self):
        with self.assertRaises(PlanError):
            plan_weight_ablation('q_proj', [16], 'zero').validate(self.gated)
        with self.assertRaises(PlanError):
            plan_weight_ablation('fc_in', [0], 'zero').validate(self.gated)
        with self.assertRaises(PlanError):
            plan_gamma_edit(2, FFN, [0], 'zero').validate(self.gated)
        with self.assertRaises(PlanError):
            InterventionPlan(TAP, REPLACE_WITH_ZERO, indices=((0, 0, 0),),
                             slot='y5').validate(self.standard)
        tap_plan = InterventionPlan(TAP, REPLACE_WITH_ZERO,
                                    indices=((0, 9, 0),), slot='x1')
        tap_plan.validate(self.gated)
        with self.assertRaises(PlanError):
            tap_plan.validate(self.gated, token_count=8)
        with self.assertRaises(PlanError):
            plan_gamma_edit(0, FFN, [16], 'zero', width=16)


class RandomBaselineTest(unittest.TestCase):

    def test_seeded_and_disjoint(self):
        first = sample_random_channels(32, 4, seed=3, exclude=[0, 1, 2])
        self.assertEqual(first, sample_random_channels(32, 4, seed=3,
                                                       exclude=[0, 1, 2]))
        self.assertEqual(first, sorted(first))
        self.assertEqual(len(set(first)), 4)
        self.assertFalse(set(first) & {0, 1, 2})

    def test_infeasible(self):
        with self.assertRaises(PlanError):
            sample_random_channels(4, 3, seed=0, exclude=[0, 1])
        self.assertEqual(sample_random_channels(4, 2, seed=0,
                                                exclude=[0, 1]), [2, 3])

    def test_matches_plan(self):
        plan = plan_weight_ablation('layers.0.v_proj', [1, 6], 'mean')
        random = random_baseline(plan, 16, seed=7)
        self.assertEqual(len(random.indices), 2)
        self.assertFalse(set(random.indices) & {1, 6})
        self.assertEqual((random.weight_name, random.layers),
                         ('v_proj', (0,)))
        self.assertEqual(random.seed, 7)
        with self.assertRaises(PlanError):
            random_baseline(plan_tma_removal('y7', 'zero'), 16, seed=0)


class PlanBuilderTest(unittest.TestCase):

    def test_channel_ablation_plans(self):
        model = build_toy_model(GATED_MLP, layer_count=2)
        name = 'layers.0.q_proj.weight'
        model.params[name] = model.params[name].clone()
        model.params[name][3] *= 100.0

        pair = channel_ablation_plans(model, 'q', 3.0)
        first = [p for p in pair.outlier_plans if p.layers == (0,)]
        self.assertEqual(len(first), 1)
        self.assertEqual(first[0].indices, (3,))
        self.assertEqual(first[0].weight_name, 'q_proj')
        self.assertEqual(len(pair.random_plans), len(pair.outlier_plans))
        random = pair.random_plans[pair.outlier_plans.index(first[0])]
        self.assertEqual(len(random.indices), 1)
        self.assertNotIn(3, random.indices)

        with self.assertRaises(PlanError):
            channel_ablation_plans(model, 'attention', 3.0)

    def test_norm_family_builds_gamma_plans(self):
        model = build_toy_model(GATED_MLP, layer_count=1)
        name = 'layers.0.ffn_norm.weight'
        model.params[name] = model.params[name].clone()
        model.params[name][7] = 50.0
        pair = channel_ablation_plans(model, 'layernorm', 2.0)
        gammas = [p for p in pair.outlier_plans if p.block_kind == FFN]
        self.assertEqual([(p.target_kind, p.indices) for p in gammas],
                         [(GAMMA, (7,))])

    def test_otc_plans(self):
        sets = {'layers.0.q_proj': OtcSet('layers.0.q_proj', (2,), 16),
                'layers.1.k_proj': OtcSet('layers.1.k_proj', (), 8)}
        outliers, randoms = otc_plans(sets)
        self.assertEqual(len(outliers), 1)
        self.assertEqual((outliers[0].weight_name, outliers[0].layers,
                          outliers[0].indices), ('q_proj', (0,), (2,)))
        self.assertNotIn(2, randoms[0].indices)


class SerializationTest(unittest.TestCase):

    def test_round_trip(self):
        plans = [plan_tma_removal('y6', 'mean'),
                 plan_gamma_edit(1, SELF_ATTENTION, [4, 2], 'zero'),
                 plan_weight_ablation('layers.0.o_proj', [7], 'mean'),
                 InterventionPlan(TAP, REPLACE_WITH_ZERO,
                                  indices=((0, 1, 2), (1, 0, 3)), slot='y7')]
        self.assertEqual(plan_from_json(plan_to_json(plans)), plans)
        self.assertEqual(plans_digest(plan_from_json(plan_to_json(plans))),
                         plans_digest(plans))

    def test_bad_files(self):
        with self.assertRaises(PlanError):
            plan_from_json('not json')
        with self.assertRaises(PlanError):
            plan_from_json('{"format": 2, "plans": []}')
        with self.assertRaises(PlanError):
            plan_from_json('{"format": 1, "plans": [{"target_kind": "tap", '
                           '"policy": "replace_with_zero", "colour": 1}]}')

    def test_tap_plan_with_channel_indices(self):
        # Hand-edited tap plan carrying bare channels instead of triples.
        with self.assertRaises(PlanError):
            plan_from_json('{"format": 1, "plans": [{"target_kind": "tap", '
                           '"policy": "replace_with_zero", "slot": "x1", '
                           '"indices": [3, 4]}]}')
        with self.assertRaises(PlanError):
            InterventionPlan(TAP, REPLACE_WITH_ZERO, indices=(3,), slot='x1')

    def test_baseline_digest(self):
        self.assertEqual(plans_digest([]), 'baseline')
        empty = plan_gamma_edit(0, FFN, [], 'zero')
        self.assertEqual(plans_digest([empty]), 'baseline')
        plan = plan_gamma_edit(0, FFN, [1], 'zero')
        self.assertNotEqual(plans_digest([plan]), 'baseline')
        self.assertEqual(plans_digest([plan, empty]), plans_digest([plan]))
