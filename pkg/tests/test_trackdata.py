import json

import numpy as np
import pytest

from core.errors import AnnotationError, CapacityError, ConfigError, ContractError
from utils.trackdata import (
    BACKGROUND,
    PALETTE,
    ClipAnnotation,
    decode_latent,
    encode_frames,
    gen_dataset,
    gen_synthetic,
    load_dataset,
    parse_annotations,
    read_annotation,
    read_frames,
    serialize_annotations,
    write_annotation,
    write_dataset,
    write_frames,
)

MINIMAL = {
    'width': 64, 'height': 32, 'frames': 2,
    'tracklets': [{'id': 5, 'category': 1, 'boxes': [[8, 4, 24, 20], None]}],
}


def _doc(**changes):
    doc = json.loads(json.dumps(MINIMAL))
    doc.update(changes)
    return json.dumps(doc)


def _tracklet(**changes):
    item = dict(MINIMAL['tracklets'][0])
    item.update(changes)
    return item


def _assert_boxes_bound_rectangles(clip, frames):
    for tracklet in clip.tracklets:
        color = PALETTE[tracklet.category_id]
        assert tracklet.boxes[0] is not None
        for t, b in enumerate(tracklet.boxes):
            mask = np.all(frames.pixels[t] == color, axis=-1)
            if b is None:
                assert not mask.any()
                continue
            ys, xs = np.nonzero(mask)
            bound = (xs.min() / clip.width, ys.min() / clip.height,
                     (xs.max() + 1) / clip.width, (ys.max() + 1) / clip.height)
            assert bound == pytest.approx(b.as_tuple())


class TestParse:
    def test_minimal_document(self):
        clip = parse_annotations(json.dumps(MINIMAL))
        assert (clip.frames, clip.width, clip.height) == (2, 64, 32)
        tracklet = clip.tracklets[0]
        assert (tracklet.instance_id, tracklet.category_id) == (5, 1)
        assert tracklet.boxes[0].as_tuple() == (0.125, 0.125, 0.375, 0.625)
        assert tracklet.boxes[1] is None
        assert tracklet.present.tolist() == [True, False]

    def test_bytes_and_optional_keys(self):
        clip = parse_annotations(_doc(fps=8, caption='two boxes').encode('utf-8'))
        assert clip.fps == 8 and clip.caption == 'two boxes'

    def test_syntax_error_has_position(self):
        with pytest.raises(AnnotationError) as err:
            parse_annotations('{\n  "width": 4,\n  "height": }')
        assert err.value.code == 'syntax'
        assert err.value.line == 3 and err.value.column is not None
        assert 'line 3' in str(err.value)

    @pytest.mark.parametrize('doc, code', [
        (_doc(tracklets=[_tracklet(boxes=[[24, 4, 8, 20], None])]), 'box_order'),
        (_doc(tracklets=[_tracklet(boxes=[[8, 4, 65, 20], None])]), 'out_of_range'),
        (_doc(tracklets=[_tracklet(boxes=[[-1, 4, 8, 20], None])]), 'out_of_range'),
        (_doc(tracklets=[_tracklet(), _tracklet()]), 'duplicate_id'),
        (_doc(tracklets=[_tracklet(boxes=[[8, 4, 24, 20]])]), 'ragged_frames'),
        (_doc(tracklets=[_tracklet(boxes=[None, None])]), 'empty_tracklet'),
        (_doc(tracklets=[_tracklet(category=-2)]), 'out_of_range'),
        (_doc(tracklets=[_tracklet(id='5')]), 'bad_type'),
        (_doc(tracklets=[_tracklet(boxes=[[8, 4, 24], None])]), 'bad_type'),
        (_doc(width=0), 'out_of_range'),
        (_doc(frames=2.5), 'bad_type'),
        (_doc(fps=-1), 'bad_type'),
        (_doc(caption=3), 'bad_type'),
        (json.dumps({'width': 4, 'height': 4, 'tracklets': []}), 'missing_key'),
        (json.dumps({'width': 4, 'height': 4, 'frames': 1}), 'missing_key'),
        ('[1, 2]', 'bad_type'),
    ])
    def test_rejections(self, doc, code):
        with pytest.raises(AnnotationError) as err:
            parse_annotations(doc)
        assert err.value.code == code

    def test_capacity(self):
        items = [_tracklet(id=i) for i in range(3)]
        with pytest.raises(AnnotationError) as err:
            parse_annotations(_doc(tracklets=items), k_max=2)
        assert err.value.code == 'capacity'

    def test_boxes_may_touch_the_border(self):
        clip = parse_annotations(_doc(tracklets=[_tracklet(boxes=[[0, 0, 64, 32], [10, 10, 10, 10]])]))
        assert clip.tracklets[0].boxes[0].as_tuple() == (0.0, 0.0, 1.0, 1.0)


class TestSerialize:
    def test_key_order_and_decimals(self):
        text = serialize_annotations(parse_annotations(_doc(fps=8, caption='c')))
        assert list(json.loads(text)) == ['fps', 'width', 'height', 'frames', 'tracklets', 'caption']
        assert '[8.000000, 4.000000, 24.000000, 20.000000]' in text

    def test_reparse_is_stable(self):
        doc = _doc(tracklets=[_tracklet(boxes=[[3.1234567, 1, 7.5, 9.25], [0, 0, 1, 1]])])
        once = parse_annotations(doc)
        assert parse_annotations(serialize_annotations(once)) == once

    def test_empty_clip(self):
        clip = ClipAnnotation(3, 8, 8)
        assert parse_annotations(serialize_annotations(clip)) == clip

    def test_file_round_trip(self, tmp_path):
        clip = parse_annotations(json.dumps(MINIMAL))
        path = write_annotation(clip, tmp_path / 'nested' / 'annotation.json')
        assert read_annotation(path) == clip


def _corpus_document(i):
    clip, _ = gen_synthetic(i, 1 + i % 4, 2 + i % 5, 16 + 8 * (i % 3), 16 + 8 * (i % 2),
                            caption=f'clip {i}' if i % 3 == 0 else None)
    return serialize_annotations(clip)


ERROR_FIXTURES = {
    'syntax': ('{"width": 4, "height": 4, "frames": 1, "tracklets": [}', {}),
    'missing_key': (json.dumps({'width': 4, 'height': 4, 'tracklets': []}), {}),
    'bad_type': (_doc(tracklets=[_tracklet(id='5')]), {}),
    'box_order': (_doc(tracklets=[_tracklet(boxes=[[24, 4, 8, 20], None])]), {}),
    'out_of_range': (_doc(tracklets=[_tracklet(boxes=[[8, 4, 65, 20], None])]), {}),
    'duplicate_id': (_doc(tracklets=[_tracklet(), _tracklet()]), {}),
    'ragged_frames': (_doc(tracklets=[_tracklet(boxes=[[8, 4, 24, 20]])]), {}),
    'empty_tracklet': (_doc(tracklets=[_tracklet(boxes=[None, None])]), {}),
    'capacity': (_doc(tracklets=[_tracklet(id=i) for i in range(3)]), {'k_max': 2}),
}


class TestDocumentCorpus:
    @pytest.mark.parametrize('i', range(50))
    def test_generated_document_round_trips(self, i):
        text = _corpus_document(i)
        clip = parse_annotations(text)
        again = serialize_annotations(clip)
        assert again == text
        assert parse_annotations(again) == clip

    @pytest.mark.parametrize('code', sorted(ERROR_FIXTURES))
    def test_error_fixture(self, code):
        doc, kwargs = ERROR_FIXTURES[code]
        with pytest.raises(AnnotationError) as err:
            parse_annotations(doc, **kwargs)
        assert err.value.code == code


class TestClipViews:
    def test_frame_slice(self):
        clip = parse_annotations(json.dumps(MINIMAL))
        assert len(clip.frame_slice(0).tracklets) == 1
        assert clip.frame_slice(1).tracklets == ()
        assert clip.frame_slice(0).frames == 1
        with pytest.raises(ContractError):
            clip.frame_slice(2)

    def test_without_tracklets(self):
        clip = parse_annotations(_doc(caption='x'))
        bare = clip.without_tracklets()
        assert bare.tracklets == () and bare.caption == 'x'


class TestSynthetic:
    def test_deterministic(self):
        clip_a, frames_a = gen_synthetic(4, 3, 6, 32, 32)
        clip_b, frames_b = gen_synthetic(4, 3, 6, 32, 32)
        assert clip_a == clip_b
        np.testing.assert_array_equal(frames_a.pixels, frames_b.pixels)

    def test_no_instances(self):
        clip, frames = gen_synthetic(0, 0, 4, 16, 16)
        assert clip.tracklets == ()
        np.testing.assert_array_equal(frames.pixels, np.full((4, 16, 16, 3), BACKGROUND))

    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_boxes_bound_the_rectangles(self, seed):
        clip, frames = gen_synthetic(seed, 3, 6, 32, 32)
        _assert_boxes_bound_rectangles(clip, frames)

    @pytest.mark.parametrize('seed', range(5))
    def test_crowded_frame_drops_instances(self, seed):
        clip, frames = gen_synthetic(seed, 8, 6, 8, 8, max_tries=5)
        assert 1 <= len(clip.tracklets) < 8
        assert clip.instance_ids == list(range(len(clip.tracklets)))
        _assert_boxes_bound_rectangles(clip, frames)

    def test_distinct_categories(self):
        clip, _ = gen_synthetic(9, 5, 3, 32, 32)
        cats = [tr.category_id for tr in clip.tracklets]
        assert len(set(cats)) == len(cats) >= 1

    def test_capacity(self):
        with pytest.raises(CapacityError):
            gen_synthetic(0, 3, 4, 16, 16, k_max=2)
        with pytest.raises(CapacityError):
            gen_synthetic(0, len(PALETTE) + 1, 4, 16, 16, k_max=16)

    def test_bad_geometry(self):
        with pytest.raises(ConfigError):
            gen_synthetic(0, 1, 0, 16, 16)

    def test_dataset(self):
        pairs = gen_dataset(1, 5, 3, 4, 16, 16)
        assert len(pairs) == 5
        assert all(1 <= len(clip.tracklets) <= 3 for clip, _ in pairs)
        fixed = gen_dataset(1, 3, 2, 4, 16, 16, vary_instances=False)
        assert all(1 <= len(clip.tracklets) <= 2 for clip, _ in fixed)

    def test_dataset_capacity_checked_upfront(self):
        with pytest.raises(CapacityError):
            gen_dataset(0, 2, 99, 4, 16, 16)
        with pytest.raises(ConfigError):
            gen_dataset(0, -1, 2, 4, 16, 16)


class TestCodec:
    def test_latent_shape(self):
        _, frames = gen_synthetic(0, 2, 3, 32, 32)
        assert encode_frames(frames, 4).shape == (3, 8, 8, 48)

    def test_unit_patch_is_a_gain(self, rng):
        pixels = rng.random((2, 4, 4, 3))
        np.testing.assert_array_equal(encode_frames(pixels, 1), pixels * 4.0)

    def test_rendered_frames_invert_exactly(self):
        _, frames = gen_synthetic(3, 3, 4, 16, 16)
        np.testing.assert_array_equal(decode_latent(encode_frames(frames, 4), 4).pixels, frames.pixels)

    @pytest.mark.parametrize('patch', [1, 2, 4])
    def test_every_8bit_level_inverts_exactly(self, patch):
        levels = np.arange(256) / 255
        pixels = np.broadcast_to(levels[:, None, None], (256, 4, 3)).reshape(1, 32, 32, 3).copy()
        np.testing.assert_array_equal(decode_latent(encode_frames(pixels, patch), patch).pixels, pixels)

    def test_random_pixels_invert_exactly(self, rng):
        pixels = rng.random((2, 8, 8, 3))
        np.testing.assert_array_equal(decode_latent(encode_frames(pixels, 2), 2).pixels, pixels)

    def test_random_latent_inverts(self, rng):
        latent = rng.standard_normal((2, 2, 2, 12))
        np.testing.assert_allclose(encode_frames(decode_latent(latent, 2), 2), latent, rtol=0, atol=1e-12)

    def test_patch_layout(self):
        pixels = np.zeros((1, 2, 2, 3))
        pixels[0, 0, 1] = [1.0, 0.5, 0.25]
        latent = encode_frames(pixels, 2)
        # row-major inside the patch, channel innermost
        np.testing.assert_array_equal(latent[0, 0, 0, 3:6], [4.0, 2.0, 1.0])

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            encode_frames(np.zeros((1, 6, 8, 3)), 4)

    def test_bad_latent(self):
        with pytest.raises(ContractError):
            decode_latent(np.zeros((1, 2, 2, 47)), 4)

    def test_clamp(self):
        out = decode_latent(np.full((1, 1, 1, 3), 10.0), 1, clamp=True)
        np.testing.assert_array_equal(out.pixels, np.ones((1, 1, 1, 3)))


class TestFrameFiles:
    def test_round_trip(self, tmp_path):
        _, frames = gen_synthetic(2, 2, 3, 16, 16)
        index = write_frames(frames, tmp_path / 'frames')
        assert index.read_text().split() == ['frame_000.ppm', 'frame_001.ppm', 'frame_002.ppm']
        back = read_frames(index)
        np.testing.assert_allclose(back.pixels, frames.pixels, atol=1 / 255)

    def test_missing_index(self, tmp_path):
        with pytest.raises(ContractError):
            read_frames(tmp_path / 'index.txt')

    def test_dataset_tree(self, tmp_path):
        pairs = gen_dataset(5, 2, 2, 3, 16, 16)
        dirs = write_dataset(pairs, tmp_path)
        assert [d.name for d in dirs] == ['clip_000', 'clip_001']
        loaded = load_dataset(tmp_path, patch=4)
        for (clip, frames), (loaded_clip, latent) in zip(pairs, loaded):
            assert loaded_clip == clip
            np.testing.assert_allclose(latent, encode_frames(frames, 4), atol=4 / 255)

    def test_empty_tree(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path)
