import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regionvad import formats, gmm, normalcy, synth
from regionvad.errors import FormatError, ValidationError
from regionvad.evaluation import GroundTruthAnnotation
from regionvad.motion import FlowField
from regionvad.records import Box, Observation
from regionvad.regions import RegionMap
from regionvad.scoring import FrameScoreSeries, TrackletScore

REJECTED = (FormatError, ValidationError)


# ------------------------------------------------------------ sample artifacts


def sample_observations():
    out = synth.simulate_scene(synth.four_zone_layout(), 60, synth.AnomalySpec(0.3), seed=1)
    obs = out.observations[:40]
    obs.append(Observation("cam 2", 7, 0, Box(0.0, 1.5, 3.25, 4.0), "person", None, None, True))
    return obs


def sample_annotations():
    return [GroundTruthAnnotation("v", 3, Box(1.0, 2.0, 5.5, 9.125), 4),
            GroundTruthAnnotation("w", 0, Box(0.1, 0.2, 0.30000000000000004, 1.0), 0)]


def sample_flow(seed=0, h=5, w=7):
    rng = np.random.default_rng(seed)
    u = rng.normal(0, 3, (h, w)).astype(np.float32).astype(np.float64)
    v = rng.normal(0, 3, (h, w)).astype(np.float32).astype(np.float64)
    return FlowField(u, v)


def sample_model():
    X = np.random.default_rng(2).normal(size=(300, 3))
    return gmm.fit_em(X, 2, "full", gmm.EmConfig(seed=1))


def sample_region_map(K=5):
    labels = np.arange(6 * 9).reshape(6, 9) % K
    return RegionMap(labels, K, {"seed": 3, "method": "grid", "mu_kl": 0.125})


def sample_model_set():
    rng = np.random.default_rng(4)
    rmap = RegionMap(np.array([[0, 1, 2]]), 3)
    X = np.column_stack([np.eye(4)[rng.integers(0, 4, 120)], rng.normal(2, 1, 120),
                         rng.normal(3, 1, 120)])
    grouped = {0: X[:90], 1: X[90:110], 2: X[110:113]}
    return rmap, normalcy.train_regional_models(grouped, rmap, k_max=3)


def sample_tracklet_scores():
    return [TrackletScore("v", 1, 0, 2, 0, 3.5, (Box(0, 0, 1, 1), Box(1, 1, 2, 2.5))),
            TrackletScore("v", 2, 4, 5, 1, -1e-300, (Box(3, 3, 4, 4),))]


def sample_frame_scores():
    raw = FrameScoreSeries("v", np.array([0.1, 2.0, -3.5, 1e17]), 0.1)
    sm = FrameScoreSeries("v", np.array([0.30000000000000004, 1.0, 5e-324, 2.0]), 0.1, 7.0)
    raw2 = FrameScoreSeries("x y", np.array([1.0]), 1.0)
    return [(raw, sm), (raw2, raw2)]


# ---------------------------------------------------------------- round trips


def test_observations_round_trip(tmp_path):
    obs = sample_observations()
    data = formats.write_observations(tmp_path / "t.jsonl", obs)
    assert formats.read_observations(tmp_path / "t.jsonl") == obs
    assert formats.write_observations(tmp_path / "u.jsonl", obs) == data


def test_negative_zero_is_written_unsigned(tmp_path):
    o = Observation("v", 0, 0, Box(-0.0, 0.0, 2.0, 2.0), "car", 0.0, 2.0)
    formats.write_observations(tmp_path / "t.jsonl", [o])
    assert b"-0" not in (tmp_path / "t.jsonl").read_bytes()
    assert formats.read_observations(tmp_path / "t.jsonl") == [o]


def test_tracklet_windowing_from_file(tmp_path):
    obs = [Observation("v", 1, f, Box(0, 0, 4, 4), "car", 0.5, 2.0) for f in range(7)]
    formats.write_observations(tmp_path / "t.jsonl", obs)
    ts = formats.read_tracklets(tmp_path / "t.jsonl", t_w=3)
    assert [len(t.observations) for t in ts] == [3, 3, 1]
    (tmp_path / "e.jsonl").write_bytes(b"")
    assert formats.read_tracklets(tmp_path / "e.jsonl") == []


def test_bad_records_are_all_reported(tmp_path):
    good = formats.dumps(formats._obs_record(Observation("v", 0, 0, Box(0, 0, 2, 2), "car", 0.5, 2.0)))
    lines = [good,
             good.replace('"box":[0,0,2,2]', '"box":[3,0,2,2]'),
             good.replace('"car"', '"truck"'),
             good,  # frame 0 again: not increasing
             "{not json"]
    (tmp_path / "t.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError) as err:
        formats.read_observations(tmp_path / "t.jsonl")
    assert [p.split(":")[0] for p in err.value.problems] == ["line 2", "line 3", "line 4", "line 5"]


def test_moving_record_without_motion_needs_flow(tmp_path):
    o = Observation("v", 0, 0, Box(0, 0, 2, 2), "car", None, None, False)
    formats.write_observations(tmp_path / "t.jsonl", [o])
    with pytest.raises(ValidationError):
        formats.read_observations(tmp_path / "t.jsonl")
    assert formats.read_observations(tmp_path / "t.jsonl", allow_missing_motion=True) == [o]


def test_annotations_round_trip(tmp_path):
    ann = sample_annotations()
    formats.write_annotations(tmp_path / "a.jsonl", ann)
    assert formats.read_annotations(tmp_path / "a.jsonl") == ann


def test_flo_round_trip_and_layout(tmp_path):
    flow = sample_flow()
    data = formats.write_flo(tmp_path / "f.flo", flow)
    assert data[:4] == b"PIEH" and len(data) == 12 + 8 * 35
    back = formats.read_flo(tmp_path / "f.flo")
    assert np.array_equal(back.u, flow.u) and np.array_equal(back.v, flow.v)


def test_flo_rejects_bad_magic_and_truncation():
    data = formats.encode_flo(sample_flow())
    with pytest.raises(FormatError) as err:
        formats.decode_flo(b"XXXX" + data[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        formats.decode_flo(data[:-3])
    assert err.value.offset == len(data) - 3


def test_flow_directory(tmp_path):
    flows = {0: sample_flow(0), 2: sample_flow(1)}
    formats.write_flow_dir(tmp_path, "v", flows)
    view = formats.FlowDirectory(tmp_path, "v")
    assert np.array_equal(view[2].u, flows[2].u)
    with pytest.raises(KeyError):
        view[1]


def test_region_map_round_trip(tmp_path):
    rmap = sample_region_map()
    formats.write_region_map(tmp_path / "r.pgm", rmap)
    back = formats.read_region_map(tmp_path / "r.pgm")
    assert np.array_equal(back.labels, rmap.labels) and back.K == rmap.K
    assert back.provenance == rmap.provenance
    side = formats.read_document(tmp_path / "r.pgm.json", "region-map")
    assert side["attribute_layout"]["direction"] == [4, 16] and len(side["palette"]) == 5


def test_region_map_with_256_labels(tmp_path):
    labels = np.arange(256 * 3).reshape(24, 32) % 256
    rmap = RegionMap(labels, 256)
    formats.write_region_map(tmp_path / "r.pgm", rmap)
    back = formats.read_region_map(tmp_path / "r.pgm")
    assert np.array_equal(back.labels, labels)
    assert set(np.unique(back.labels)) == set(range(256))
    with pytest.raises(ValueError):
        formats.write_region_map(tmp_path / "big.pgm", RegionMap(np.arange(257).reshape(1, -1), 257))


def test_gmm_round_trip(tmp_path):
    model = sample_model()
    data = formats.write_gmm(tmp_path / "m.json", model)
    back = formats.read_gmm(tmp_path / "m.json")
    X = np.random.default_rng(5).normal(size=(1000, 3)) * 3
    np.testing.assert_allclose(back.score_samples(X), model.score_samples(X), rtol=1e-12)
    assert formats.write_gmm(tmp_path / "n.json", back) == data


def test_model_set_round_trip(tmp_path):
    _, ms = sample_model_set()
    data = formats.write_model_set(tmp_path / "s.json", ms)
    back = formats.read_model_set(tmp_path / "s.json")
    assert [back.kind(r) for r in range(3)] == [ms.kind(r) for r in range(3)]
    assert formats.write_model_set(tmp_path / "t.json", back) == data


def test_score_tables_round_trip(tmp_path):
    pairs = sample_frame_scores()
    formats.write_frame_scores(tmp_path / "f.csv", pairs)
    back = formats.read_frame_scores(tmp_path / "f.csv")
    assert list(back) == ["v", "x y"]
    assert np.array_equal(back["v"][0], pairs[0][0].scores)
    assert np.array_equal(back["v"][1], pairs[0][1].scores)
    ts = sample_tracklet_scores()
    formats.write_tracklet_scores(tmp_path / "t.jsonl", ts)
    assert formats.read_tracklet_scores(tmp_path / "t.jsonl") == ts


def test_metrics_round_trip(tmp_path):
    report = {"auc": 0.9375, "rbdc": 1 / 3, "curve": [[0.0, 0.0], [1.0, 0.5]], "note": "ok"}
    formats.write_metrics(tmp_path / "m.json", report)
    assert formats.read_metrics(tmp_path / "m.json") == report


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_reals_round_trip_exactly(x):
    assert formats.loads(formats.dumps([x]))[0] == x


def test_non_finite_values_are_refused():
    with pytest.raises(ValueError):
        formats.dumps({"a": math.inf})
    with pytest.raises(ValueError):
        formats.loads('{"a": NaN}')


def test_documents_are_byte_deterministic(tmp_path):
    a = formats.write_gmm(tmp_path / "a.json", sample_model())
    b = formats.write_gmm(tmp_path / "b.json", sample_model())
    assert a == b and a.endswith(b"\n") and b" " not in a


def test_run_config_text_round_trip():
    cfg = formats.RunConfig(seed=4, K=6, spatial_affinity=0.25, kernel_sigma="3.5")
    assert formats.RunConfig.from_mapping(formats.parse_config_text(cfg.to_text())) == cfg
    with pytest.raises(ValidationError):
        formats.RunConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ValidationError):
        formats.RunConfig(t_w=0)
    with pytest.raises(ValidationError):
        formats.parse_config_text("novalue\n")


# ------------------------------------------------------------------- fuzzing
#
# Property: the reader accepts a corrupted file only if the writer, fed the
# parsed result, reproduces exactly those bytes. Anything the writer cannot
# produce must be rejected.


def mutate(data, rng):
    data = bytearray(data)
    op = rng.integers(0, 7)
    if not data:
        return bytes([int(rng.integers(0, 256))])
    i = int(rng.integers(0, len(data)))
    if op == 0:
        data[i] ^= 1 << int(rng.integers(0, 8))
    elif op == 1:
        data[i] = int(rng.integers(0, 256))
    elif op == 2:
        del data[i]
    elif op == 3:
        data.insert(i, int(rng.integers(0, 256)))
    elif op == 4:
        data = data[:i]
    elif op == 5:
        data += bytes(rng.integers(0, 256, size=int(rng.integers(1, 5))).tolist())
    else:
        j = min(len(data), i + int(rng.integers(1, 6)))
        data[i:i] = data[i:j]
    return bytes(data)


def _fuzz(tmp_path, name, data, read, write, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    src, dst = tmp_path / name, tmp_path / ("re-" + name)
    accepted = 0
    for _ in range(n):
        bad = mutate(data, rng)
        if bad == data:
            continue
        src.write_bytes(bad)
        try:
            parsed = read(src)
        except REJECTED:
            continue
        write(dst, parsed)
        assert dst.read_bytes() == bad, f"accepted unproducible bytes {bad[:80]!r}"
        accepted += 1
    return accepted


def test_fuzz_observations(tmp_path):
    data = formats.write_observations(tmp_path / "o", sample_observations())
    _fuzz(tmp_path, "t.jsonl", data, formats.read_observations, formats.write_observations)


def test_fuzz_annotations(tmp_path):
    data = formats.write_annotations(tmp_path / "a", sample_annotations())
    _fuzz(tmp_path, "a.jsonl", data, formats.read_annotations, formats.write_annotations)


def test_fuzz_flo(tmp_path):
    data = formats.encode_flo(sample_flow())
    _fuzz(tmp_path, "f.flo", data, formats.read_flo, formats.write_flo)


def test_fuzz_documents(tmp_path):
    for name, writer, reader, obj in [("g.json", formats.write_gmm, formats.read_gmm, sample_model()),
                                      ("s.json", formats.write_model_set, formats.read_model_set,
                                       sample_model_set()[1]),
                                      ("m.json", formats.write_metrics, formats.read_metrics,
                                       {"auc": 0.5, "rbdc": 0.25})]:
        data = writer(tmp_path / ("orig-" + name), obj)
        # any change to a checksummed canonical document is detectable
        assert _fuzz(tmp_path, name, data, reader, writer) == 0


def test_fuzz_score_tables(tmp_path):
    data = formats.write_frame_scores(tmp_path / "f", sample_frame_scores())

    def write_back(path, parsed):
        pairs = [(FrameScoreSeries(v, raw, 0.0), FrameScoreSeries(v, sm, 0.0))
                 for v, (raw, sm) in parsed.items()]
        formats.write_frame_scores(path, pairs)

    _fuzz(tmp_path, "f.csv", data, formats.read_frame_scores, write_back)
    data = formats.write_tracklet_scores(tmp_path / "t", sample_tracklet_scores())
    _fuzz(tmp_path, "t.jsonl", data, formats.read_tracklet_scores, formats.write_tracklet_scores)


def test_fuzz_region_map(tmp_path):
    rmap = sample_region_map()
    raster = formats.write_region_map(tmp_path / "r.pgm", rmap)
    sidecar = (tmp_path / "r.pgm.json").read_bytes()
    rng = np.random.default_rng(1)
    for target in ("raster", "sidecar"):
        for _ in range(1000):
            formats.write_region_map(tmp_path / "r.pgm", rmap)
            path = tmp_path / ("r.pgm" if target == "raster" else "r.pgm.json")
            original = raster if target == "raster" else sidecar
            bad = mutate(original, rng)
            if bad == original:
                continue
            path.write_bytes(bad)
            with pytest.raises(REJECTED):
                formats.read_region_map(tmp_path / "r.pgm")


def test_fuzz_graymap_decoder():
    data = formats.encode_pgm(sample_region_map().labels)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        bad = mutate(data, rng)
        try:
            labels = formats.decode_pgm(bad)
        except FormatError:
            continue
        assert formats.encode_pgm(labels) == bad
