import numpy as np
import pytest
from scipy import stats

from maskattn.scenes import (COLORS, N_TOKENS, PAD, REGIONS, VOCAB, ComplianceReport, SceneObject,
                             SceneSpec, VocabularyError, all_scenes, caption_of, classify_pixels,
                             compliance_score, decode_caption, parse_prompt, parse_scene_record,
                             render_objects, render_scene, sample_scene, scene_record)

ALL = all_scenes()


def spec(*triples, bg=0.5):
    return SceneSpec(tuple(SceneObject(*t) for t in triples), bg)


class TestSpace:
    def test_counts(self):
        assert len(all_scenes(1)) == 32
        assert len(all_scenes(2)) == 32 * 3 * 3 * 2 // 2 * 2  # ordered pairs, distinct color and region
        assert len(ALL) == 608

    def test_validation(self):
        with pytest.raises(ValueError):
            spec(("red", "square", "left"), ("red", "circle", "right")).validate()
        with pytest.raises(ValueError):
            spec(("red", "square", "left"), ("blue", "circle", "left")).validate()
        with pytest.raises(ValueError):
            SceneSpec(()).validate()


class TestSampling:
    def test_same_seed_same_scene(self):
        assert sample_scene(11) == sample_scene(11)

    def test_invariant_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            s = sample_scene(rng)
            s.validate()
            assert 0.4 <= s.background <= 0.6

    def test_regions_uniform(self):
        rng = np.random.default_rng(1)
        counts = dict.fromkeys(REGIONS, 0)
        for _ in range(10_000):
            for o in sample_scene(rng).objects:
                counts[o.region] += 1
        assert stats.chisquare(list(counts.values())).pvalue > 1e-3


class TestRender:
    def test_empty_scene_is_constant(self):
        img = render_objects((), 16, 0.45)
        assert img.shape == (3, 16, 16) and np.all(img == 0.45)

    def test_red_square_left(self):
        img = render_scene(spec(("red", "square", "left")))
        labels = classify_pixels(img)
        assert np.any(labels[:, :8] == 0)
        assert not np.any(labels[:, 8:] == 0)
        assert np.all((img >= 0) & (img <= 1))

    def test_min_size(self):
        with pytest.raises(ValueError):
            render_scene(spec(("red", "square", "left")), 7)


class TestCaption:
    def test_single_object(self):
        ids = caption_of(spec(("red", "square", "left")))
        assert [VOCAB[i] for i in ids[:3]] == ["red", "square", "left"]
        assert list(ids[3:]) == [PAD] * 5 and len(ids) == N_TOKENS

    def test_two_objects_in_order(self):
        s = spec(("blue", "circle", "top"), ("red", "square", "left"))
        assert [VOCAB[i] for i in caption_of(s)[:7]] == ["blue", "circle", "top", "and", "red", "square", "left"]

    def test_round_trip_and_injective(self):
        seen = set()
        for objs in ALL:
            s = SceneSpec(objs)
            ids = tuple(caption_of(s))
            assert decode_caption(ids) == s
            seen.add(ids)
        assert len(seen) == len(ALL)

    def test_prompt_errors(self):
        with pytest.raises(VocabularyError, match="valid words"):
            parse_prompt("purple square left")
        with pytest.raises(VocabularyError):
            parse_prompt("red square")
        with pytest.raises(VocabularyError):
            parse_prompt("red square left and red circle right")


class TestMetric:
    def test_ground_truth_is_perfect_everywhere(self):
        for objs in ALL:
            for bg in (0.4, 0.5, 0.6):
                s = SceneSpec(objs, bg)
                assert compliance_score(render_scene(s), s).total == 1.0

    def test_background_invariance(self):
        for objs in ALL[::7]:
            ref = compliance_score(render_scene(SceneSpec(objs, 0.5)), SceneSpec(objs))
            for bg in (0.4, 0.45, 0.55, 0.6):
                r = compliance_score(render_scene(SceneSpec(objs, bg)), SceneSpec(objs))
                assert (r.presence, r.binding, r.placement) == (ref.presence, ref.binding, ref.placement)

    def test_swapped_colors(self):
        s = spec(("red", "square", "left"), ("blue", "circle", "right"))
        img = render_scene(spec(("blue", "square", "left"), ("red", "circle", "right")))
        r = compliance_score(img, s)
        assert (r.presence, r.binding, r.placement) == (1.0, 0.0, 0.0)

    def test_one_missing_object(self):
        s = spec(("red", "square", "left"), ("blue", "circle", "right"))
        img = render_objects(s.objects[:1])
        assert compliance_score(img, s).presence == 0.5

    def test_all_single_edit_corruptions(self):
        # delete -> presence, recolor -> binding, move -> placement
        n_edits = 0
        for objs in all_scenes(2):
            s = SceneSpec(objs)
            for k, o in enumerate(objs):
                rest = [x for j, x in enumerate(objs) if j != k]
                r = compliance_score(render_objects(rest), s)
                assert r.presence < 1.0
                used_c = {x.color for x in objs}
                for c in COLORS:
                    if c not in used_c:
                        edited = rest + [SceneObject(c, o.shape, o.region)]
                        assert compliance_score(render_objects(edited), s).binding < 1.0
                        n_edits += 1
                used_r = {x.region for x in objs}
                for reg in REGIONS:
                    if reg not in used_r:
                        edited = rest + [SceneObject(o.color, o.shape, reg)]
                        assert compliance_score(render_objects(edited), s).placement < 1.0
                        n_edits += 1
        assert n_edits == 576 * 8

    def test_outputs_bounded_on_noise(self):
        rng = np.random.default_rng(2)
        for objs in ALL[::40]:
            r = compliance_score(rng.random((3, 16, 16)), SceneSpec(objs))
            for v in (r.presence, r.binding, r.placement, r.total):
                assert 0.0 <= v <= 1.0

    def test_total_is_mean(self):
        r = ComplianceReport(1.0, 0.5, 0.0)
        assert r.total == 0.5


class TestRecords:
    def test_round_trip(self):
        s = spec(("yellow", "circle", "bottom"), ("green", "square", "top"))
        line = scene_record(42, s)
        assert line == "42,yellow,circle,bottom,green,square,top"
        assert parse_scene_record(line) == (42, s)

    def test_malformed(self):
        with pytest.raises(ValueError):
            parse_scene_record("1,red,square")
        with pytest.raises(ValueError):
            parse_scene_record("1,red,square,left,red,circle,right")
