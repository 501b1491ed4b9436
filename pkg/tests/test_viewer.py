import json

import numpy as np
import pandas as pd

from core.geometry import Box
from utils.data_loader import (
    list_clips,
    list_runs,
    load_ablation,
    load_clip,
    load_loss,
    load_report,
    report_iou_frame,
    run_kind,
)
from utils.run_config import resolve_config, write_resolved
from utils.trackdata import gen_dataset, write_dataset
from utils.visualizations import (
    create_ablation_bar,
    create_frame_strip,
    create_iou_heatmap,
    create_loss_curve,
    create_similarity_heatmap,
)


def _run(root, name, stage='image'):
    run = root / name
    write_resolved(resolve_config(overrides={'stage': stage}), run)
    return run


class TestDataLoader:
    def test_runs_and_kinds(self, tmp_path):
        train = _run(tmp_path, 'train')
        pd.DataFrame({'step': [1, 2], 'loss': [1.0, 0.5]}).to_csv(train / 'loss.csv', index=False)
        data = _run(tmp_path, 'data')
        write_dataset(gen_dataset(0, 1, 1, 2, 8, 8), data)
        _run(tmp_path, 'empty')
        runs = list_runs(str(tmp_path))
        assert runs['run'].tolist() == ['data', 'empty', 'train']
        assert runs['kind'].tolist() == ['clips', 'other', 'training']

    def test_missing_root(self, tmp_path):
        assert list_runs(str(tmp_path / 'nowhere')).empty

    def test_loss_carries_stage(self, tmp_path):
        run = _run(tmp_path, 'video', stage='video')
        pd.DataFrame({'step': [1], 'loss': [0.9]}).to_csv(run / 'loss.csv', index=False)
        assert load_loss(str(run))['stage'].tolist() == ['video']

    def test_report_and_iou_frame(self, tmp_path):
        doc = {'summary': {'mean_iou': 0.5},
               'clips': {'clip_000': {'instance_ids': [3, 7], 'per_frame_iou': [[1.0, None], [0.5, 0.25]]}}}
        (tmp_path / 'report.json').write_text(json.dumps(doc), encoding='utf-8')
        report = load_report(str(tmp_path))
        frame = report_iou_frame(report['clips']['clip_000'])
        assert list(frame.index) == [3, 7]
        assert np.isnan(frame.loc[3, 1]) and frame.loc[7, 1] == 0.25

    def test_ablation(self, tmp_path):
        pd.DataFrame({'variant': ['full'], 'seed': [0], 'mean_iou': [0.3]}).to_csv(tmp_path / 'ablation.csv',
                                                                                  index=False)
        verdicts = [{'ordering': 'full >= vanilla', 'violations': 0, 'seeds': 1, 'holds': True}]
        (tmp_path / 'ablation.json').write_text(json.dumps({'orderings': verdicts}), encoding='utf-8')
        table, orderings = load_ablation(str(tmp_path))
        assert table['variant'].tolist() == ['full']
        assert orderings['holds'].tolist() == [True]
        assert run_kind(tmp_path) == 'ablation'

    def test_clips(self, tmp_path):
        pairs = gen_dataset(2, 2, 2, 3, 8, 8)
        write_dataset(pairs, tmp_path)
        clips = list_clips(tmp_path)
        assert len(clips) == 2
        clip, pixels = load_clip(clips[1])
        assert clip == pairs[1][0]
        assert pixels.shape == (3, 8, 8, 3)


class TestCharts:
    def test_loss_curve_per_stage(self):
        df = pd.DataFrame({'step': [1, 2, 1, 2], 'loss': [1.0, 0.8, 0.7, 0.6],
                           'stage': ['image', 'image', 'video', 'video']})
        fig = create_loss_curve(df, window=2)
        assert len(fig.data) >= 2

    def test_heatmaps(self):
        iou = pd.DataFrame([[1.0, np.nan]], index=[4])
        assert create_iou_heatmap(iou).data[0].z.shape == (1, 2)
        assert create_similarity_heatmap(np.eye(3)).data[0].z.shape == (3, 3)

    def test_ablation_bar_means(self):
        df = pd.DataFrame({'variant': ['full', 'full', 'vanilla'], 'seed': [0, 1, 0],
                           'mean_iou': [0.4, 0.6, 0.1]})
        bar = create_ablation_bar(df).data[0]
        assert list(bar.x) == ['full', 'vanilla']
        np.testing.assert_allclose(bar.y, [0.5, 0.1])

    def test_frame_strip_boxes(self):
        boxes = [[(Box(0.0, 0.0, 0.5, 0.5), '#ff0000')], []]
        fig = create_frame_strip(np.zeros((2, 4, 4, 3)), boxes, title='clip')
        assert len(fig.layout.shapes) == 1
        assert fig.layout.shapes[0].x1 == 1.5
