import json
import math
from pathlib import Path

import numpy as np
import pytest

from scpo_lab import data
from scpo_lab.data import DatasetFormatError, GenConfig, IntegrityError
from scpo_lab.difficulty import semantic_proximity, structural_discrepancy
from scpo_lab.objectives import PreferencePair

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = GenConfig(n_pairs=12, embedding_dim=6, patch_count=4, patch_dim=3, seed=5)


def test_generation_is_seeded():
    a, b = data.generate(SMALL), data.generate(SMALL)
    assert a == b
    assert data.dumps_bundle(a) == data.dumps_bundle(b)
    c = data.generate(GenConfig(**{**SMALL.__dict__, "seed": 6}))
    assert data.dumps_bundle(c) != data.dumps_bundle(a)


def test_generated_records_are_valid():
    b = data.generate(SMALL)
    assert len(b.pairs) == 12 and len(b.images) == 24 and len(b.queries) == 12
    for im in b.images:
        im.validate(max_patches=4)
    ids = [p.pair_id for p in b.pairs]
    assert ids == sorted(ids)
    for p in b.pairs:
        assert p.chosen_response != p.rejected_response
    # three contexts per pair, none shared across pairs
    assert len(b.contexts()) == 36


@pytest.mark.parametrize("delta", [0.0, 0.2, 0.8])
def test_perturbation_scale_sets_embedding_cosine(delta):
    b = data.generate(GenConfig(n_pairs=5, delta_min=delta, delta_max=delta, seed=1))
    imgs = b.image_map
    for p in b.pairs:
        cos = semantic_proximity(imgs[p.chosen_image], imgs[p.rejected_image])
        assert cos == pytest.approx(math.cos(delta * math.pi / 2), abs=1e-12)
        changed = np.any(imgs[p.chosen_image].patch_features != imgs[p.rejected_image].patch_features, axis=1)
        assert changed.sum() == math.ceil(delta * 9)


def test_config_validation():
    for bad in ({"n_pairs": 0}, {"response_vocab_size": 1}, {"delta_min": 0.5, "delta_max": 0.1},
                {"embedding_dim": 1}):
        with pytest.raises(ValueError):
            GenConfig(**bad)


def test_seed_streams_are_independent():
    a = data.seed_stream(0, data.STREAM_DATA).standard_normal(4)
    b = data.seed_stream(0, data.STREAM_BASE_POLICY).standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, data.seed_stream(0, data.STREAM_DATA).standard_normal(4))


def test_base_policy():
    b = data.generate(SMALL)
    assert data.base_policy(b, 0.0, 3) == b.uniform_policy()
    p1, p2 = data.base_policy(b, 1.0, 3), data.base_policy(b, 1.0, 3)
    assert p1 == p2
    assert p1 != data.base_policy(b, 1.0, 4)
    assert p1.contexts == b.contexts()


def test_round_trip_is_bit_exact(tmp_path):
    b = data.generate(SMALL)
    path = tmp_path / "d.jsonl"
    data.write_bundle(b, path)
    back = data.read_bundle(path)
    assert back == b
    assert data.dumps_bundle(back) == path.read_text()


def test_tiny_bundle_round_trip(tiny_bundle, tmp_path):
    text = data.dumps_bundle(tiny_bundle)
    assert text.endswith("\n") and "\r" not in text
    assert data.loads_bundle(text) == tiny_bundle
    header = json.loads(text.splitlines()[0])
    assert (header["n_images"], header["n_queries"], header["n_pairs"]) == (4, 2, 2)


def _lines(bundle):
    return data.dumps_bundle(bundle).splitlines()


def test_truncation_is_detected(tiny_bundle):
    lines = _lines(tiny_bundle)
    with pytest.raises(DatasetFormatError, match="truncated"):
        data.loads_bundle("\n".join(lines[:-1]) + "\n")


def test_malformed_line_is_located(tiny_bundle):
    lines = _lines(tiny_bundle)
    lines[3] = lines[3][:-5]
    with pytest.raises(DatasetFormatError) as info:
        data.loads_bundle("\n".join(lines))
    assert info.value.line == 4
    assert "line 4" in str(info.value)


def test_bad_records(tiny_bundle):
    lines = _lines(tiny_bundle)
    with pytest.raises(DatasetFormatError):
        data.loads_bundle("")
    with pytest.raises(DatasetFormatError, match="header"):
        data.loads_bundle('{"format": "other"}\n')
    # non-unit embedding on the first image record
    rec = json.loads(lines[1])
    rec["embedding"] = [(2.0).hex(), (0.0).hex()]
    bad = [lines[0], json.dumps(rec)] + lines[2:]
    with pytest.raises(DatasetFormatError) as info:
        data.loads_bundle("\n".join(bad))
    assert info.value.line == 2
    # a pair record placed before the images
    with pytest.raises(DatasetFormatError, match="section"):
        data.loads_bundle("\n".join([lines[0], lines[-1]] + lines[1:-1]))


def test_integrity_checks(tiny_bundle):
    with pytest.raises(IntegrityError, match="dangling image"):
        data.DatasetBundle(tiny_bundle.images, tiny_bundle.queries,
                           [PreferencePair("p9", "qa", "a_w", "nope", 0, 1)], tiny_bundle.vocab)
    with pytest.raises(IntegrityError, match="duplicate pair"):
        data.DatasetBundle(tiny_bundle.images, tiny_bundle.queries,
                           [tiny_bundle.pairs[0], tiny_bundle.pairs[0]], tiny_bundle.vocab)
    with pytest.raises(IntegrityError, match="response"):
        data.DatasetBundle(tiny_bundle.images, tiny_bundle.queries,
                           [PreferencePair("p9", "qa", "a_w", "a_l", 0, 7)], tiny_bundle.vocab)
    with pytest.raises(IntegrityError, match="query"):
        data.DatasetBundle(tiny_bundle.images, ["qa"], tiny_bundle.pairs, tiny_bundle.vocab)


def test_hand_written_fixture_file(tiny_bundle):
    b = data.read_bundle(FIXTURES / "two_pairs.jsonl")
    assert b == tiny_bundle
    assert b.pairs[1] == PreferencePair("p1", "qb", "b_w", "b_l", 2, 0)
    assert b.image_map["b_w"].patch_positions[0].tolist() == [0.1, 0.9]
    assert b.image_map["a_l"].embedding.tolist() == [math.sqrt(0.5)] * 2


def test_zero_perturbation_copies_the_image():
    b = data.generate(GenConfig(n_pairs=6, patch_count=4, delta_min=0.0, delta_max=0.0, seed=2))
    imgs = b.image_map
    for p in b.pairs:
        a, c = imgs[p.chosen_image], imgs[p.rejected_image]
        # a unit vector dotted with itself may land one ulp under 1
        assert semantic_proximity(a, c) == pytest.approx(1.0, abs=1e-15)
        assert structural_discrepancy(a, c, epsilon=0.0) == 0.0


def test_transport_distance_grows_with_perturbation():
    means = []
    for delta in (0.1, 0.5, 1.0):
        b = data.generate(GenConfig(n_pairs=200, patch_count=4, delta_min=delta, delta_max=delta, seed=3))
        imgs = b.image_map
        means.append(np.mean([
            structural_discrepancy(imgs[p.chosen_image], imgs[p.rejected_image], epsilon=0.0) for p in b.pairs
        ]))
    assert means[0] < means[1] < means[2]
