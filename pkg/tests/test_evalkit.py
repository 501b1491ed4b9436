import json

import numpy as np
import pytest

from core.attention import AttentionParams, init_attention
from core.errors import ContractError
from core.geometry import Box, box_from_pixels
from core.instance_enhancer import EnhancerParams, init_enhancer
from utils.evalkit import (
    THRESHOLDS,
    GroundingReport,
    aggregate_reports,
    clip_features,
    detect_blobs,
    frechet_distance,
    fvd_stub,
    get_metric_status,
    grounding_miou,
    temporal_consistency_probe,
    write_report,
)
from utils.trackdata import (
    BACKGROUND,
    PALETTE,
    ClipAnnotation,
    FrameBuffer,
    Tracklet,
    encode_frames,
    gen_synthetic,
)


def _gray(frames=1, size=32):
    return np.full((frames, size, size, 3), BACKGROUND)


def _rectangles(clip, size=32, grow=0):
    pixels = _gray(clip.frames, size)
    for tracklet in clip.tracklets:
        for t, b in enumerate(tracklet.boxes):
            if b is None:
                continue
            x1, y1 = max(int(b.x1 * size) - grow, 0), max(int(b.y1 * size) - grow, 0)
            x2, y2 = int(b.x2 * size) + grow, int(b.y2 * size) + grow
            pixels[t, y1:y2, x1:x2] = PALETTE[tracklet.category_id]
    return pixels


class TestBlobs:
    def test_uniform_gray(self):
        assert detect_blobs(_gray()[0]) == []

    def test_single_rectangle(self):
        frame = _gray()[0]
        frame[4:12, 8:20] = PALETTE[0]
        blobs = detect_blobs(frame)
        assert len(blobs) == 1
        box, color = blobs[0]
        assert box.as_tuple() == (8 / 32, 4 / 32, 20 / 32, 12 / 32)
        np.testing.assert_allclose(color, PALETTE[0])
        assert blobs[0].area == 96

    def test_two_colors(self):
        frame = _gray()[0]
        frame[0:6, 0:6] = PALETTE[1]
        frame[6:10, 6:16] = PALETTE[2]
        blobs = detect_blobs(frame)
        assert [b.color_bin for b in blobs] == [2, 1]

    def test_small_components_dropped(self):
        frame = _gray()[0]
        frame[0, 0:3] = PALETTE[3]
        assert detect_blobs(frame) == []

    def test_rank_checked(self):
        with pytest.raises(ContractError):
            detect_blobs(np.zeros((4, 4)))


class TestGrounding:
    @pytest.mark.parametrize('seed', [0, 1])
    def test_renderer_self_check(self, seed):
        clip, frames = gen_synthetic(seed, 3, 8, 32, 32)
        report = grounding_miou(clip, frames)
        assert report.mean_iou >= THRESHOLDS['self_check_miou']
        assert report.identity_consistency >= 0.99
        assert report.n_boxes == sum(int(tr.present.sum()) for tr in clip.tracklets)

    def test_gray_frames_score_zero(self):
        clip, _ = gen_synthetic(0, 2, 4, 32, 32)
        report = grounding_miou(clip, _gray(4))
        assert (report.mean_iou, report.detection_rate, report.identity_consistency) == (0.0, 0.0, 0.0)
        assert all(s == 0.0 for row in report.per_frame_iou for s in row if s is not None)

    def test_tracklet_order_does_not_matter(self):
        clip, frames = gen_synthetic(2, 3, 5, 32, 32)
        reordered = ClipAnnotation(clip.frames, clip.width, clip.height, clip.tracklets[::-1])
        assert grounding_miou(clip, frames).to_dict() == grounding_miou(reordered, frames).to_dict()

    def test_dilated_rectangles_score_lower(self):
        clip = ClipAnnotation(2, 32, 32, (
            Tracklet(0, 0, (Box(0.25, 0.25, 0.5, 0.5), Box(0.3125, 0.25, 0.5625, 0.5))),
            Tracklet(1, 2, (Box(0.625, 0.625, 0.875, 0.875), None)),
        ))
        exact = grounding_miou(clip, _rectangles(clip))
        dilated = grounding_miou(clip, _rectangles(clip, grow=1))
        assert exact.mean_iou == pytest.approx(1.0)
        assert dilated.mean_iou < exact.mean_iou
        assert exact.per_frame_iou[1][1] is None

    def test_scores_bounded(self, rng):
        clip, _ = gen_synthetic(5, 3, 4, 32, 32)
        report = grounding_miou(clip, rng.random((4, 32, 32, 3)))
        for value in (report.mean_iou, report.detection_rate, report.identity_consistency):
            assert 0.0 <= value <= 1.0

    def test_frame_count_checked(self):
        clip, _ = gen_synthetic(0, 1, 4, 32, 32)
        with pytest.raises(ContractError):
            grounding_miou(clip, _gray(3))

    def test_iou_frame(self):
        clip, frames = gen_synthetic(1, 2, 3, 32, 32)
        table = grounding_miou(clip, frames).to_frame()
        assert table.shape == (len(clip.tracklets), 3)
        assert list(table.index) == clip.instance_ids


class TestAggregate:
    def test_empty(self):
        assert aggregate_reports([]) == {'mean_iou': 0.0, 'detection_rate': 0.0, 'identity_consistency': 0.0,
                                         'n_boxes': 0, 'n_clips': 0}

    def test_weighted_by_boxes(self):
        a = GroundingReport(instance_ids=[0], mean_iou=1.0, detection_rate=1.0, identity_consistency=1.0, n_boxes=1)
        b = GroundingReport(instance_ids=[0, 1], mean_iou=0.2, detection_rate=0.0, identity_consistency=0.4,
                            n_boxes=3)
        out = aggregate_reports([a, b])
        assert out['mean_iou'] == pytest.approx(0.4)
        assert out['detection_rate'] == pytest.approx(0.25)
        assert out['identity_consistency'] == pytest.approx(0.6)
        assert (out['n_boxes'], out['n_clips']) == (4, 2)


class TestStatus:
    @pytest.mark.parametrize('value, expected', [
        (0.6, 'good'), (0.5, 'good'), (0.45, 'acceptable'), (0.39, 'poor'), (None, 'unknown'), (np.nan, 'unknown'),
    ])
    def test_bands(self, value, expected):
        assert get_metric_status(value, 0.5)[0] == expected


class TestReport:
    def test_stable_layout(self, tmp_path):
        path = write_report({'mean_iou': 0.5}, tmp_path / 'out' / 'report.json', config={'seed': 1, 'clips': 2},
                            clips=[{'clip': 'clip_000'}])
        doc = json.loads(path.read_text())
        assert list(doc) == ['summary', 'clips', 'config']
        assert list(doc['config']) == ['clips', 'seed']


def _sqrtm_trace(a, b):
    return float(np.sum(np.sqrt(np.clip(np.linalg.eigvals(a @ b).real, 0.0, None))))


class TestFrechet:
    def test_closed_form(self, rng):
        x, y = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        cov_a, cov_b = x @ x.T + np.eye(3), y @ y.T + 0.5 * np.eye(3)
        mu_a, mu_b = rng.standard_normal(3), rng.standard_normal(3)
        expected = (np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
                    - 2 * _sqrtm_trace(cov_a, cov_b))
        assert frechet_distance(mu_a, cov_a, mu_b, cov_b) == pytest.approx(expected, abs=1e-8)

    def test_identical_sets(self, rng):
        clips = [rng.random((4, 4, 4, 3)) for _ in range(8)]
        assert fvd_stub(clips, clips) == pytest.approx(0.0, abs=1e-8)

    def test_brightness_shift(self, rng):
        clips = [rng.random((4, 4, 4, 3)) for _ in range(8)]
        delta = 0.1
        assert fvd_stub(clips, [c + delta for c in clips]) >= delta ** 2

    def test_needs_two_clips(self, rng):
        with pytest.raises(ContractError):
            fvd_stub([rng.random((2, 4, 4, 3))], [rng.random((2, 4, 4, 3))] * 2)

    def test_features(self):
        pixels = np.zeros((2, 2, 2, 3))
        pixels[1] = 1.0
        np.testing.assert_allclose(clip_features(pixels), [0.5, 0.5, 0.5, 1.0])
        np.testing.assert_allclose(clip_features(pixels[:1]), [0.0, 0.0, 0.0, 0.0])


class TestTemporalConsistency:
    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_instance_stream_beats_position_stream(self, rng, seed):
        # a synthetic rectangle that jumps half the frame between consecutive frames
        clip, _ = gen_synthetic(seed, 1, 4, 32, 32, disappear_prob=0.0, scale_prob=0.0)
        tracklet = clip.tracklets[0]
        first = tracklet.boxes[0]
        w, h = round((first.x2 - first.x1) * 32), round((first.y2 - first.y1) * 32)
        pixels = _gray(4)
        boxes = []
        for t in range(4):
            x = 2 if t % 2 == 0 else 18
            pixels[t, 2:2 + h, x:x + w] = PALETTE[tracklet.category_id]
            boxes.append(box_from_pixels(x, 2, x + w, 2 + h, 32, 32))
        latent = encode_frames(FrameBuffer(pixels), patch=4)

        channels, dim = latent.shape[-1], 8
        enhancer = EnhancerParams.from_params(init_enhancer(rng, channels, dim, 'enh', n_freq=2), 'enh', 2,
                                              n_freq=2, roi_size=2)
        temporal = AttentionParams.from_params(init_attention(rng, channels, 't'), 't', 1)
        moved = Tracklet(tracklet.instance_id, tracklet.category_id, tuple(boxes))
        result = temporal_consistency_probe(latent, moved, enhancer, temporal)
        assert result.instance_similarity == pytest.approx(1.0, abs=1e-9)
        assert result.instance_similarity > result.position_similarity
