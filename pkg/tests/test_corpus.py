import numpy as np
import pytest
from scipy import signal

from sgscl import corpus as C
from sgscl.corpus import LungLabel


def small_spec(**kw):
    counts = np.full((2, 4), 10)
    return C.SynthSpec(counts, np.zeros((2, 4), int), **kw)


class TestLabels:
    @pytest.mark.parametrize("crackle,wheeze,label", [(0, 0, "Normal"), (1, 0, "Crackle"),
                                                      (0, 1, "Wheeze"), (1, 1, "Both")])
    def test_flags(self, crackle, wheeze, label):
        assert C.LungLabel.from_flags(crackle, wheeze).display == label

    def test_parse(self):
        assert LungLabel.parse("wheeze") is LungLabel.WHEEZE

    def test_devices(self):
        assert C.device_name(3, icbhi=True) == "AKGC417L"
        assert C.parse_device("LittC2SE") == (1, True)
        assert C.parse_device("dev5") == (5, False)


class TestAnnotation:
    def test_row(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0.36\t2.25\t0\t1\n")
        ((start, end, lab),) = C.parse_annotation(p)
        assert lab is LungLabel.WHEEZE
        assert end - start == pytest.approx(1.89)

    def test_malformed(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0.1 0.5 0\n")
        with pytest.raises(ValueError, match="a.txt:1"):
            C.parse_annotation(p)


def test_ingest_icbhi_layout(tmp_path, caplog):
    root = tmp_path / "icbhi"
    root.mkdir()
    sr = 4000
    for stem, rows in (("101_1b1_Al_sc_Meditron", ["0.0 1.0 0 0", "1.0 2.5 1 1"]),
                       ("102_1b1_Ar_sc_AKGC417L", ["0.2 1.2 1 0"]),
                       ("103_1b1_Ar_sc_Litt3200", ["0.0 1.0 0 1"])):
        C.write_wav(root / f"{stem}.wav", C.Waveform(np.zeros(3 * sr), sr))
        (root / f"{stem}.txt").write_text("\n".join(rows) + "\n")
    split = tmp_path / "split.txt"
    split.write_text("101_1b1_Al_sc_Meditron\ttrain\n102_1b1_Ar_sc_AKGC417L\ttest\n")
    recs = C.ingest_icbhi(root, split)
    assert "103_1b1_Ar_sc_Litt3200.wav is not in the split listing" in caplog.text
    assert [(r.lung, r.device, r.split) for r in recs] == [
        (LungLabel.NORMAL, 0, "train"), (LungLabel.BOTH, 0, "train"), (LungLabel.CRACKLE, 3, "test")]
    assert recs[1].uri.endswith("#t=1.000,2.500")
    assert C.load_record_audio(recs[1]).duration == pytest.approx(1.5, abs=1e-3)


class TestSummary:
    def test_empty(self):
        t = C.summarize([], num_devices=2)
        assert all(v == 0 for per in t["lung"].values() for v in per.values())
        assert t["total"] == {"train": 0, "test": 0}

    def test_totals_agree(self):
        recs = [C.CorpusRecord(f"x{i}.wav", LungLabel(i % 4), i % 3, "train", 1.0) for i in range(11)]
        t = C.summarize(recs, 3)
        assert sum(v["train"] for v in t["lung"].values()) == 11
        assert sum(v["train"] for v in t["device"].values()) == 11


class TestBiasedCounts:
    def test_totals_exact(self):
        for total in (400, 801, 37):
            c = C.biased_counts(2, total, 0.8)
            assert c.sum() == total

    def test_home_share(self):
        c = C.biased_counts(2, 800, 0.8)
        # home device of class c is c % K; share 1/K + rho (1 - 1/K) = 0.9
        np.testing.assert_array_equal(c, [[180, 20, 180, 20], [20, 180, 20, 180]])

    def test_uncorrelated(self):
        np.testing.assert_array_equal(C.biased_counts(2, 400, 0.0), np.full((2, 4), 50))

    def test_absent_device(self):
        c = C.biased_counts(4, 400, 0.5, absent_devices=(1,))
        assert c[1].sum() == 0 and c.sum() == 400


class TestSynthesis:
    def test_counts_and_manifest(self, tmp_path):
        spec = small_spec(duration_range=(0.5, 0.6))
        recs = C.synthesize_corpus(spec, tmp_path / "a")
        assert len([r for r in recs if r.split == "train"]) == 80
        t = C.summarize(recs, 2)
        for dev in range(2):
            assert t["device"][C.device_name(dev)]["train"] == 40
        C.write_manifest(recs, tmp_path / "m.tsv")
        assert C.read_manifest(tmp_path / "m.tsv") == recs

    def test_deterministic(self, tmp_path):
        spec = C.SynthSpec(np.ones((2, 4), int), np.ones((2, 4), int), duration_range=(0.5, 0.6), seed=3)
        a = C.synthesize_corpus(spec, tmp_path / "a")
        b = C.synthesize_corpus(spec, tmp_path / "b")
        for ra, rb in zip(a, b):
            assert open(ra.path, "rb").read() == open(rb.path, "rb").read()

    @pytest.mark.parametrize("device", [0, 1])
    def test_wheeze_is_narrowband(self, device):
        spec = small_spec()
        lo, hi = spec.wheeze_band
        width = hi - lo
        for seed in range(5):
            w = C.synth_clip(LungLabel.WHEEZE, device, spec, np.random.default_rng(seed))
            f, p = signal.welch(w.samples, w.sample_rate, nperseg=4096)
            band = p[(f >= lo) & (f <= hi)].max()
            below = p[(f >= lo - width) & (f < lo)].max()
            above = p[(f > hi) & (f <= hi + width)].max()
            assert 10 * np.log10(band / max(below, above)) >= 6.0

    def test_crackle_adds_transients(self):
        spec = small_spec()
        n = C.synth_clip(LungLabel.NORMAL, 0, spec, np.random.default_rng(0)).samples
        c = C.synth_clip(LungLabel.CRACKLE, 0, spec, np.random.default_rng(0)).samples
        kurt = lambda x: np.mean((x - x.mean()) ** 4) / np.var(x) ** 2  # noqa: E731
        assert kurt(np.diff(c)) > kurt(np.diff(n))

    def test_validation(self):
        with pytest.raises(ValueError):
            C.SynthSpec(np.ones((1, 4), int), np.ones((1, 4), int))
        with pytest.raises(ValueError):
            C.SynthSpec(-np.ones((2, 4), int), np.ones((2, 4), int))
        with pytest.raises(ValueError):
            C.synthesize_corpus(C.SynthSpec(np.zeros((2, 4), int), np.zeros((2, 4), int)), "/tmp/never")


def test_wav_roundtrip(tmp_path, rng):
    x = np.clip(rng.standard_normal(1000) * 0.2, -1, 1)
    C.write_wav(tmp_path / "x.wav", C.Waveform(x, 8000))
    back = C.read_wav(tmp_path / "x.wav")
    assert back.sample_rate == 8000
    np.testing.assert_allclose(back.samples, x, atol=1e-4)
