import json
import os

import numpy as np
import pytest

from permanence import datastore
from permanence.datastore import (
    DatasetError,
    DatasetManifest,
    FovSpec,
    read_dataset,
    read_manifest,
    simulate_to_trials,
    write_dataset,
)
from permanence.sim import SimConfig


@pytest.fixture(scope="module")
def ten():
    cfg = SimConfig()
    return simulate_to_trials(cfg, 10, 5), DatasetManifest.for_config(cfg, 10, "desk", 5)


def _visible(root):
    return sorted(p for p in os.listdir(root))


class TestRoundTrip:
    def test_layout(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        names = _visible(tmp_path)
        assert names == ["manifest.json"] + [f"trial_{i:05d}" for i in range(10)]
        for n in names[1:]:
            assert sorted(os.listdir(tmp_path / n)) == ["audio.wav", "complete.csv", "meta.json", "observed.csv"]

    def test_bit_exact(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        back, man2 = read_dataset(tmp_path)
        assert man2 == man
        for a, b in zip(trials, back):
            assert a.id == b.id
            assert b.waveform.dtype == np.float32
            assert a.waveform.tobytes() == b.waveform.tobytes()
            np.testing.assert_array_equal(a.observed, b.observed)
            np.testing.assert_array_equal(a.complete, b.complete)
            np.testing.assert_array_equal(a.end_location, b.end_location)
            assert a.meta() == b.meta()

    def test_tables_are_plain_text(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        lines = (tmp_path / "trial_00000" / "observed.csv").read_text().splitlines()
        assert lines[0] == "x,y" and len(lines) == 66
        x, y = lines[1].split(",")
        float(x), float(y)

    def test_wav_header_is_float32_le(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        raw = (tmp_path / "trial_00000" / "audio.wav").read_bytes()
        assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"
        fmt = raw.index(b"fmt ")
        tag, channels = np.frombuffer(raw[fmt + 8 : fmt + 12], dtype="<u2")
        bits = np.frombuffer(raw[fmt + 22 : fmt + 24], dtype="<u2")[0]
        assert (tag, channels, bits) == (3, 7, 32)

    def test_rewrite_is_identical(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path / "a")
        write_dataset(trials, man, tmp_path / "b")
        for dirpath, _, files in os.walk(tmp_path / "a"):
            for f in files:
                p = os.path.join(dirpath, f)
                q = p.replace(str(tmp_path / "a"), str(tmp_path / "b"))
                with open(p, "rb") as fa, open(q, "rb") as fb:
                    assert fa.read() == fb.read()


class TestFaults:
    def test_interrupted_write_leaves_no_partial_trial(self, ten, tmp_path, monkeypatch):
        trials, man = ten
        real = datastore._write_table
        calls = {"n": 0}

        def flaky(path, arr):
            calls["n"] += 1
            if calls["n"] == 8:  # trial 3, observed table
                raise OSError("disk full")
            real(path, arr)

        monkeypatch.setattr(datastore, "_write_table", flaky)
        with pytest.raises(DatasetError, match="trial_00003"):
            write_dataset(trials, man, tmp_path)
        names = _visible(tmp_path)
        assert names == [f"trial_{i:05d}" for i in range(3)]
        for n in names:
            assert len(os.listdir(tmp_path / n)) == 4

    def test_keyboard_interrupt_also_cleans_up(self, ten, tmp_path, monkeypatch):
        trials, man = ten

        def boom(*a, **k):
            raise KeyboardInterrupt

        monkeypatch.setattr(datastore, "_write_table", boom)
        with pytest.raises(KeyboardInterrupt):
            write_dataset(trials, man, tmp_path)
        assert _visible(tmp_path) == []

    def test_short_observed_table_named(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        p = tmp_path / "trial_00004" / "observed.csv"
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetError, match=r"trial_00004.*observed table must have 65 rows, got 64"):
            read_dataset(tmp_path)

    def test_short_audio_named(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        from scipy.io import wavfile

        sr, audio = wavfile.read(tmp_path / "trial_00002" / "audio.wav")
        wavfile.write(tmp_path / "trial_00002" / "audio.wav", sr, audio[:-10])
        with pytest.raises(DatasetError, match=r"trial_00002.*audio must be"):
            read_dataset(tmp_path)

    def test_six_channels_rejected_before_trials(self, ten, tmp_path, monkeypatch):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        mp = tmp_path / "manifest.json"
        d = json.loads(mp.read_text())
        d["channels"] = 6
        mp.write_text(json.dumps(d))
        touched = []
        monkeypatch.setattr(datastore, "read_trial", lambda *a: touched.append(a))
        with pytest.raises(DatasetError, match="6 channels"):
            read_dataset(tmp_path)
        assert touched == []

    def test_version_mismatch(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        mp = tmp_path / "manifest.json"
        d = json.loads(mp.read_text())
        d["format_version"] = 99
        mp.write_text(json.dumps(d))
        with pytest.raises(DatasetError, match="format_version"):
            read_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            read_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / "nope")

    def test_count_mismatch(self, ten, tmp_path):
        trials, man = ten
        write_dataset(trials, man, tmp_path)
        import shutil

        shutil.rmtree(tmp_path / "trial_00009")
        with pytest.raises(DatasetError, match="10 trials but 9"):
            read_dataset(tmp_path)

    def test_write_rejects_inconsistent_manifest(self, ten, tmp_path):
        trials, man = ten
        with pytest.raises(DatasetError):
            write_dataset(trials[:3], man, tmp_path)
        assert not tmp_path.joinpath("manifest.json").exists()


def test_fov_must_be_positive():
    with pytest.raises(ValueError):
        FovSpec(0.0, 0.25)
