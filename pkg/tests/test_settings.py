import unittest
from pathlib import Path
from typing import Optional, Tuple

import pytest

from goalmask_nav.settings import RunSettings, SettingsError, coerce, load_settings, parse_settings
from goalmask_nav.world import WorldError


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestCoerce:
    def test_scalars(self):
        assert coerce(" 3 ", int, "k") == 3
        assert coerce("1e-4", float, "k") == 1e-4
        assert coerce("Yes", bool, "k") is True
        assert coerce("off", bool, "k") is False

    def test_tuple_and_optional(self):
        assert coerce("32, 64,128", Tuple[int, ...], "k") == (32, 64, 128)
        assert coerce("none", Optional[int], "k") is None
        assert coerce("7", Optional[int], "k") == 7

    def test_bad_values(self):
        with pytest.raises(SettingsError, match=r"\[model\] layers"):
            coerce("four", int, "[model] layers")
        with pytest.raises(SettingsError):
            coerce("maybe", bool, "k")


class TestParse:
    def test_missing_sections_keep_defaults(self):
        settings = parse_settings("[train]\nepochs = 3\n")
        assert settings.train.epochs == 3
        assert settings.model == RunSettings().model

    def test_unknown_key(self):
        with pytest.raises(SettingsError, match="unknown key 'epoch'"):
            parse_settings("[train]\nepoch = 3\n")

    def test_unknown_section(self):
        with pytest.raises(SettingsError, match="unknown section"):
            parse_settings("[optimizer]\nlr = 1\n")

    def test_keys_are_case_sensitive(self):
        with pytest.raises(SettingsError):
            parse_settings("[train]\nEpochs = 3\n")

    def test_world_is_validated(self):
        with pytest.raises(WorldError):
            parse_settings("[world]\nwidth = 8\n")

    def test_malformed(self):
        with pytest.raises(SettingsError):
            parse_settings("epochs = 3\n")


class TestRunFiles(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.miniature = load_settings(CONFIGS / "miniature.ini")

    def test_desk_file_matches_defaults(self):
        self.assertEqual(load_settings(CONFIGS / "desk.ini"), RunSettings())

    def test_miniature_file(self):
        self.assertEqual(self.miniature.model.token_dim, 8)
        self.assertEqual(self.miniature.model.unet_channels, (8, 16, 16))
        self.assertEqual(self.miniature.data.patch_size, 12)
        self.assertEqual(self.miniature.model.patch_size, self.miniature.data.patch_size)

    def test_seed_override(self):
        settings = load_settings(CONFIGS / "miniature.ini", seed=9)
        seeds = (settings.data.seed, settings.train.seed, settings.benchmark.seed, settings.probe.seed)
        self.assertEqual(seeds, (9, 9, 9, 9))
        self.assertNotEqual(self.miniature.train.seed, 9)

    def test_missing_file(self):
        with self.assertRaises(SettingsError):
            load_settings(CONFIGS / "absent.ini")


class TestResolved:
    def test_paths_resolved_against_output(self, tmp_path):
        settings = parse_settings(f"[benchmark]\ngoal =\nunified = {tmp_path / 'u.ckpt'}\n").resolved("runs/a")
        assert settings.benchmark.explore == str(Path("runs/a") / "checkpoints/explore.ckpt")
        assert settings.benchmark.unified == str(tmp_path / "u.ckpt")
        assert settings.benchmark.goal == ""
        assert settings.probe.out_dir == str(Path("runs/a") / "probe")
