from pathlib import Path

import pytest
import yaml

from core.errors import ConfigError
from utils.run_config import (
    RESOLVED_NAME,
    denoiser_config,
    load_defaults,
    noise_schedule,
    optimizer_config,
    resolve_config,
    write_resolved,
)

DESK_RUN = Path(__file__).resolve().parent.parent / 'config' / 'desk_run.yaml'


def _yaml(tmp_path, values, name='run.yaml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(values), encoding='utf-8')
    return path


class TestResolve:
    def test_defaults(self):
        cfg = resolve_config()
        assert dict(cfg) == load_defaults()
        assert cfg.seed == 0 and cfg['patch'] == 4
        assert cfg.stage == 'video' and cfg.instance_fusion == 'gated_cross'

    def test_immutable(self):
        cfg = resolve_config()
        with pytest.raises(AttributeError):
            cfg.seed = 3
        with pytest.raises(AttributeError):
            cfg.no_such_key

    def test_file_then_flags(self, tmp_path):
        path = _yaml(tmp_path, {'steps': 10, 'dim': 32})
        cfg = resolve_config(path, {'steps': 20, 'lr': None})
        assert (cfg.steps, cfg.dim) == (20, 32)
        assert cfg.lr == load_defaults()['lr']

    def test_coercion(self):
        cfg = resolve_config(overrides={'steps': '5', 'lr': '0.5', 'use_motion': 'off', 'dim': 16.0})
        assert cfg.steps == 5 and cfg.lr == 0.5 and cfg.use_motion is False and cfg.dim == 16

    @pytest.mark.parametrize('overrides', [
        {'steps': 'many'},
        {'steps': 2.5},
        {'steps': True},
        {'use_motion': 'maybe'},
        {'stage': 'audio'},
        {'instance_fusion': 'cross'},
        {'unknown_key': 1},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            resolve_config(overrides=overrides)

    def test_unknown_key_in_file(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_config(_yaml(tmp_path, {'epochs': 3}))

    def test_bad_files(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_config(tmp_path / 'missing.yaml')
        listing = tmp_path / 'list.yaml'
        listing.write_text('- 1\n- 2\n', encoding='utf-8')
        with pytest.raises(ConfigError):
            resolve_config(listing)
        broken = tmp_path / 'broken.yaml'
        broken.write_text('steps: [1, 2\n', encoding='utf-8')
        with pytest.raises(ConfigError):
            resolve_config(broken)

    def test_replace(self):
        cfg = resolve_config()
        changed = cfg.replace(frames=3)
        assert changed.frames == 3 and cfg.frames == 8
        with pytest.raises(ConfigError):
            cfg.replace(frames='x')

    def test_desk_run_resolves(self):
        cfg = resolve_config(DESK_RUN)
        assert (cfg.clips, cfg.frames, cfg.width, cfg.steps, cfg.eval_clips) == (64, 8, 32, 3000, 16)


class TestResolvedEcho:
    def test_sorted_and_reloadable(self, tmp_path):
        cfg = resolve_config(overrides={'seed': 7})
        path = write_resolved(cfg, tmp_path / 'run')
        assert path.name == RESOLVED_NAME
        text = path.read_text(encoding='utf-8')
        keys = [line.split(':')[0] for line in text.splitlines()]
        assert keys == sorted(keys)
        assert yaml.safe_load(text) == dict(cfg)
        assert resolve_config(path) == cfg

    def test_deterministic(self, tmp_path):
        cfg = resolve_config()
        a = write_resolved(cfg, tmp_path / 'a').read_bytes()
        b = write_resolved(cfg, tmp_path / 'b').read_bytes()
        assert a == b


class TestDerived:
    def test_denoiser_geometry(self):
        model = denoiser_config(resolve_config())
        assert (model.frames, model.height, model.width, model.channels) == (8, 8, 8, 48)
        assert model.stage == 'video'

    def test_patch_divisibility(self):
        with pytest.raises(ConfigError):
            denoiser_config(resolve_config(overrides={'width': 30}))

    def test_optimizer_and_schedule(self):
        cfg = resolve_config(overrides={'lr': 0.01, 'train_steps': 20})
        assert optimizer_config(cfg).lr == 0.01
        assert noise_schedule(cfg).n_steps == 20
