import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionvad import motion, synth
from regionvad.records import Box, Observation
from regionvad.synth import AnomalySpec, SceneLayout, ToyRuleSet, Zone, generate_toy, simulate_scene

# ---------------------------------------------------------------------- toy


def test_toy_constraint_pairs_never_appear_in_training():
    rules = ToyRuleSet()
    data = generate_toy(rules, 20_000, 0, seed=1)
    r, o = data.train_triples[:, 0], data.train_triples[:, 1]
    walkway, car = rules.regions.index("walkway"), rules.objects.index("car")
    assert not np.any((r == walkway) & (o == car))
    for (region, obj), p in rules.region_object_constraints.items():
        if p == 0.0:
            assert not np.any((r == rules.regions.index(region)) & (o == rules.objects.index(obj)))


def test_toy_empty_training_set():
    data = generate_toy(n_train=0, n_test=10, seed=0)
    assert data.train.shape == (0, 10) and data.test.shape == (10, 10)


def test_toy_region_marginal():
    data = generate_toy(n_train=100_000, n_test=0, seed=2)
    freq = np.bincount(data.train_triples[:, 0], minlength=4) / 100_000
    np.testing.assert_allclose(freq, [0.25] * 4, atol=0.01)


def test_toy_labels_match_a_rule_recheck():
    rules = ToyRuleSet()
    data = generate_toy(rules, 100, 4000, seed=3)
    for (r, o, s), y in zip(data.test_triples, data.test_labels):
        assert y == (not rules.supported(r, o, s))
    assert data.test_labels[:2000].sum() == 0
    assert 0 < data.test_labels.mean() < 0.5


def test_toy_encoding_is_concatenated_one_hot():
    data = generate_toy(n_train=50, n_test=0, seed=0)
    assert np.array_equal(data.train.sum(axis=1), np.full(50, 3.0))
    assert np.array_equal(data.train[:, :4].argmax(axis=1), data.train_triples[:, 0])


def test_toy_conditionals_normalise():
    rules = ToyRuleSet()
    np.testing.assert_allclose(rules.object_given_region().sum(axis=1), 1.0, rtol=1e-15)
    np.testing.assert_allclose(rules.speed_given_object().sum(axis=1), 1.0, rtol=1e-15)
    assert rules.object_given_region()[0].tolist()[1] == 1.0  # walkway -> person


def test_toy_rejects_bad_rules():
    with pytest.raises(ValueError):
        ToyRuleSet(object_speed_hints={("car", "fast"): 1.5})
    blocked = {("walkway", o): 0.0 for o in synth.TOY_OBJECTS}
    with pytest.raises(ValueError):
        generate_toy(ToyRuleSet(region_object_constraints=blocked), 10, 10)
    with pytest.raises(ValueError):
        generate_toy(n_train=-1)


def test_toy_is_deterministic():
    a, b = generate_toy(n_train=500, n_test=500, seed=9), generate_toy(n_train=500, n_test=500, seed=9)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test_labels, b.test_labels)


# -------------------------------------------------------------------- scene


def test_rate_zero_has_no_annotations():
    out = simulate_scene(synth.four_zone_layout(), 400, AnomalySpec(0.0), seed=1)
    assert out.annotations == [] and set(out.track_kinds.values()) == {"normal"}
    assert len(out.observations) > 0


def test_same_seed_same_output():
    spec = AnomalySpec(0.3)
    a = simulate_scene(synth.four_zone_layout(), 300, spec, seed=4)
    b = simulate_scene(synth.four_zone_layout(), 300, spec, seed=4)
    assert a.observations == b.observations and a.annotations == b.annotations
    assert a.velocities == b.velocities and a.config == b.config
    c = simulate_scene(synth.four_zone_layout(), 300, spec, seed=5)
    assert c.observations != a.observations


def test_zone_speed_mean():
    layout = SceneLayout(64, 400, (Zone((0.0, 0.0, 400.0, 64.0), {"car": 1.0}, 0.0, 4.0,
                                        spawn_rate=12.0),))
    out = simulate_scene(layout, 1500, seed=0)
    speeds = {}
    for o in out.observations:
        speeds.setdefault(o.track_id, []).append(o.speed)
    assert len(speeds) >= 100
    mean = np.mean([np.mean(v) for v in speeds.values()])
    assert abs(mean - 4.0) <= 0.4
    headings = [o.orientation for o in out.observations]
    assert max(min(h, 2 * math.pi - h) for h in headings) < 0.3


def test_annotations_are_emitted_observations():
    out = simulate_scene(synth.four_zone_layout(), 600, AnomalySpec(0.5), seed=2)
    emitted = {(o.video_id, o.frame, o.box, o.track_id) for o in out.observations}
    assert out.annotations
    for a in out.annotations:
        assert (a.video_id, a.frame, a.box, a.track_id) in emitted
        assert out.track_kinds[a.track_id] != "normal"


def test_each_anomaly_kind_is_realised():
    layout = synth.four_zone_layout()
    for kind in synth.ANOMALY_KINDS:
        out = simulate_scene(layout, 800, AnomalySpec(1.0, (kind,)), seed=3)
        kinds = set(out.track_kinds.values())
        assert kind in kinds
        if kind == "wrong-category":
            for a in out.annotations:
                o = next(o for o in out.observations if o.track_id == a.track_id)
                zone = layout.zones[layout.zone_at(*o.box.center)]
                assert not zone.allows(o.category) or layout.zone_at(*o.box.center) < 0


def test_cross_zone_paths_are_annotated_only_where_out_of_place():
    layout = synth.four_zone_layout()
    out = simulate_scene(layout, 1000, AnomalySpec(1.0, ("cross-zone-path",)), seed=6)
    ann = {(a.track_id, a.frame) for a in out.annotations}
    assert ann
    for o in out.observations:
        zi = layout.zone_at(*o.box.center)
        violated = zi >= 0 and not layout.zones[zi].allows(o.category)
        assert ((o.track_id, o.frame) in ann) == violated


@pytest.mark.parametrize("rate", [-0.1, 1.5])
def test_rate_out_of_range_rejected(rate):
    with pytest.raises(ValueError):
        simulate_scene(synth.four_zone_layout(), 10, AnomalySpec(rate))


def test_bad_arguments_rejected():
    with pytest.raises(ValueError):
        simulate_scene(synth.four_zone_layout(), 0)
    with pytest.raises(ValueError):
        AnomalySpec(0.1, ("teleport",))
    with pytest.raises(ValueError):
        Zone((0, 0, 0, 5), {"car": 1.0}, 0.0, 1.0)
    with pytest.raises(ValueError):
        SceneLayout(10, 10, (Zone((0, 0, 20, 5), {"car": 1.0}, 0.0, 1.0),))


def test_true_raster_and_gaps():
    four = synth.four_zone_layout()
    r = four.zone_raster()
    assert set(np.unique(r)) == {0, 1, 2, 3} and not four.has_gaps()
    assert synth.three_zone_layout().has_gaps()
    assert four.zone_at(1.0, 1.0) == 0 and four.zone_at(127.5, 1.0) == 3


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_boxes_stay_inside_the_frame(seed):
    layout = synth.four_zone_layout()
    out = simulate_scene(layout, 120, AnomalySpec(0.5), seed=seed)
    for o in out.observations:
        assert 0 <= o.box.x1 < o.box.x2 <= layout.width
        assert 0 <= o.box.y1 < o.box.y2 <= layout.height


# --------------------------------------------------------------------- flow


def _one_object(vx, vy, extra=()):
    layout = SceneLayout(20, 30, (Zone((0.0, 0.0, 30.0, 20.0), {"car": 1.0}, 0.0, 3.0),))
    obs = [Observation("v", 0, 1, Box(4, 4, 12, 10), "car", 0.0, 3.0)] + list(extra)
    vel = {(0, 1): (vx, vy)}
    vel.update({(o.track_id, o.frame): (-1.0, 2.0) for o in extra})
    return synth.SynthOutput("v", 3, layout, obs, [], layout.zone_raster(), vel,
                             {o.track_id: "normal" for o in obs}, {})


def test_empty_frame_has_zero_flow():
    flows = synth.emit_flow_rasters(_one_object(3.0, 0.0), [0])
    assert not flows[0].u.any() and not flows[0].v.any()


def test_one_moving_object_gives_bin_zero(backend):
    out = _one_object(3.0, 0.0)
    f = synth.emit_flow_rasters(out, [1])[1]
    h = motion.hof(f, out.observations[0].box)
    assert h.counts[0] == 48 and h.counts.sum() == 48
    assert h.mean_speeds[0] == 3.0


def test_later_track_overwrites_overlap():
    other = Observation("v", 1, 1, Box(8, 6, 16, 12), "car", 0.0, 3.0)
    f = synth.emit_flow_rasters(_one_object(3.0, 0.0, [other]), [1])[1]
    assert f.u[7, 9] == -1.0 and f.v[7, 9] == 2.0
    assert f.u[5, 5] == 3.0


def test_flow_frames_must_exist():
    with pytest.raises(ValueError):
        synth.emit_flow_rasters(_one_object(1.0, 0.0), [3])
