"""File formats, the synthetic generator, and the command-line pipeline."""

import json
import os

import numpy as np
import pytest

from convqa.cli import main
from convqa.data import (
    FormatError,
    QASample,
    SyntheticConfig,
    SyntheticScene,
    generate_synthetic,
    load_dataset,
    load_hints,
    load_predictions,
    prepare_samples,
    read_features,
    restrict_hints,
    save_dataset,
    save_hints,
    save_predictions,
    train_dev_split,
    write_features,
)
from convqa.fusion import HintSet
from convqa.model import ConvS2S, ModelConfig, save_checkpoint
from convqa.vocab import EOS_ID, SOS_ID, Vocabulary, build_vocab, normalize, tokenize

from fixtures import CLASSIFIER_HINTS, COMBINED_TEXT, GENERATIVE_HINT, QUESTION, hint_set


def three_samples():
    return [
        QASample("s001", "img001", "en", "what color is the box", "red"),
        QASample("s002", "img002", "vi", "mau gi cai hop", "do"),
        QASample("s003", "img003", "ja", "nani iro", "aka"),
    ]


class TestDatasetFile:
    def test_round_trip_sorted(self, tmp_path):
        path = tmp_path / "d.jsonl"
        save_dataset(path, list(reversed(three_samples())))
        loaded = load_dataset(path)
        assert loaded == three_samples()

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"sample_id": "a", "image_id": "i", "language": "en", '
                        '"question": "q"}\n')
        with pytest.raises(FormatError, match=r"d\.jsonl:1.*answer"):
            load_dataset(path)

    def test_empty_answer_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        save_dataset(path, [QASample("a", "i", "en", "q", "")])
        with pytest.raises(FormatError, match="empty"):
            load_dataset(path)

    def test_duplicate_id_rejected_with_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        sample = three_samples()[0]
        save_dataset(path, [sample, sample])
        with pytest.raises(FormatError, match=r"d\.jsonl:2.*duplicate"):
            load_dataset(path)

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("not json\n")
        with pytest.raises(FormatError, match=r"d\.jsonl:1"):
            load_dataset(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nowhere.jsonl"):
            load_dataset(tmp_path / "nowhere.jsonl")

    def test_no_tmp_leftovers(self, tmp_path):
        save_dataset(tmp_path / "d.jsonl", three_samples())
        assert os.listdir(tmp_path) == ["d.jsonl"]


class TestHintFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "h.jsonl"
        hints = {"s001": hint_set(), "s002": HintSet([], "pear")}
        save_hints(path, hints)
        loaded = load_hints(path)
        assert loaded["s001"].classifier_hints == CLASSIFIER_HINTS
        assert loaded["s001"].generative_hint == GENERATIVE_HINT
        assert loaded["s002"].classifier_hints == []
        assert loaded["s002"].generative_hint == "pear"

    def test_bad_probability_named_line(self, tmp_path):
        path = tmp_path / "h.jsonl"
        path.write_text(json.dumps({
            "sample_id": "s", "classifier": [{"text": "x", "prob": 2.0}],
        }) + "\n")
        with pytest.raises(FormatError, match=r"h\.jsonl:1"):
            load_hints(path)

    def test_missing_sample_id(self, tmp_path):
        path = tmp_path / "h.jsonl"
        path.write_text('{"classifier": []}\n')
        with pytest.raises(FormatError, match="sample_id"):
            load_hints(path)


class TestPredictionsFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "p.jsonl"
        save_predictions(path, [("s001", ["red", "box"]), ("s002", [])])
        assert load_predictions(path) == {"s001": "red box", "s002": ""}

    def test_duplicate_rejected(self, tmp_path):
        path = tmp_path / "p.jsonl"
        save_predictions(path, [("s001", ["a"]), ("s001", ["b"])])
        with pytest.raises(FormatError, match="duplicate"):
            load_predictions(path)


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "f.vfea"
        matrix = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
        write_features(path, matrix)
        got = read_features(path)
        np.testing.assert_array_equal(got, matrix)
        write_features(tmp_path / "g.vfea", got)
        assert path.read_bytes() == (tmp_path / "g.vfea").read_bytes()

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "f.vfea"
        write_features(path, np.zeros((2, 2), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            read_features(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "f.vfea"
        write_features(path, np.zeros((2, 2), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_features(path)

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "f.vfea"
        write_features(path, np.zeros((2, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="bytes"):
            read_features(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "f.vfea"
        path.write_bytes(b"VFEA\x01\x00")
        with pytest.raises(FormatError, match="truncated"):
            read_features(path)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError, match="2-D"):
            write_features(tmp_path / "f.vfea", np.zeros(4, dtype=np.float32))


class TestRestrictHints:
    def test_modes(self):
        hs = hint_set()
        assert restrict_hints(hs, "none") is None
        assert restrict_hints(None, "both") is None
        only_cls = restrict_hints(hs, "classifier")
        assert only_cls.classifier_hints == CLASSIFIER_HINTS
        assert only_cls.generative_hint is None
        only_gen = restrict_hints(hs, "generative")
        assert only_gen.classifier_hints == []
        assert only_gen.generative_hint == GENERATIVE_HINT
        assert restrict_hints(hs, "both") is hs

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            restrict_hints(hint_set(), "all")


class TestSyntheticGenerator:
    def test_fixed_seed_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(n_samples=12, seed=3)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        for name in ("dataset.jsonl", "hints.jsonl", "features/img00000.vfea",
                     "features/img00011.vfea"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_gold_keyword_is_top_hint(self, tmp_path):
        samples, hints = generate_synthetic(SyntheticConfig(n_samples=40, seed=4), tmp_path)
        for s in samples:
            top_text, top_p = hints[s.sample_id].classifier_hints[0]
            assert top_text in s.answer.split()
            assert 0.1 <= top_p < 0.5
            probs = [p for _, p in hints[s.sample_id].classifier_hints]
            assert probs == sorted(probs, reverse=True)

    def test_zero_corruption_generative_is_gold(self, tmp_path):
        samples, hints = generate_synthetic(
            SyntheticConfig(n_samples=40, seed=5, corruption=0.0), tmp_path)
        for s in samples:
            assert hints[s.sample_id].generative_hint in s.answer.split()

    def test_min_answer_length_one_occurs(self, tmp_path):
        samples, _ = generate_synthetic(SyntheticConfig(n_samples=40, seed=6), tmp_path)
        lengths = [len(s.answer.split()) for s in samples]
        assert min(lengths) == 1
        q_lengths = [len(s.question.split()) for s in samples]
        assert sum(q_lengths) / len(q_lengths) > sum(lengths) / len(lengths)

    def test_language_restriction(self, tmp_path):
        samples, _ = generate_synthetic(
            SyntheticConfig(n_samples=10, seed=7, languages=("vi",)), tmp_path)
        assert {s.language for s in samples} == {"vi"}

    def test_unknown_language_rejected(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_samples=1, languages=("en", "xx"))

    def test_hint_probability_cap(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_samples=1, hint_high=0.9)

    def test_feature_files_match_scene_projection(self, tmp_path):
        cfg = SyntheticConfig(n_samples=3, seed=8, patches=4, dim=16)
        samples, _ = generate_synthetic(cfg, tmp_path)
        raw = read_features(tmp_path / "features" / f"{samples[0].image_id}.vfea")
        assert raw.shape == (5, 16)


class TestSceneProjection:
    def test_shape_and_cls_row(self):
        scene = SyntheticScene("en", 1, 2, 3, 0)
        out = scene.project(4, 8)
        assert out.shape == (5, 8)
        np.testing.assert_allclose(out[0], out[1:].mean(axis=0), atol=1e-6)

    def test_injective_at_zero_noise(self):
        seen = set()
        for cat in range(4):
            for color in range(4):
                scene = SyntheticScene("en", cat, color, 1, 2)
                seen.add(scene.project(3, 8).tobytes())
        assert len(seen) == 16

    def test_noise_perturbs(self):
        scene = SyntheticScene("en", 0, 0, 0, 0)
        a = scene.project(3, 8)
        b = scene.project(3, 8, noise=0.1, rng=np.random.default_rng(0))
        assert np.abs(a - b).max() > 0.0


class TestPrepareSamples:
    def fruit_world(self, tmp_path=None):
        sample = QASample("s001", "img001", "en", QUESTION, "pineapples")
        corpus = [tokenize(normalize(QUESTION), "en"), tokenize("pineapples")]
        for text, _ in CLASSIFIER_HINTS:
            corpus.append(tokenize(text))
        vocab = build_vocab(corpus)
        return sample, vocab

    def test_reproduces_published_sequence(self):
        sample, vocab = self.fruit_world()
        enc, = prepare_samples([sample], {"s001": hint_set()}, vocab)
        assert [vocab.token(i) for i in enc.src_ids] == COMBINED_TEXT.split()
        assert enc.tgt_ids == [SOS_ID, vocab.token_id("pineapples"), EOS_ID]
        assert enc.gold_tokens == ["pineapples"]
        assert enc.visual is None

    def test_hint_mode_none_drops_hints(self):
        sample, vocab = self.fruit_world()
        enc, = prepare_samples([sample], {"s001": hint_set()}, vocab, hint_mode="none")
        text = [vocab.token(i) for i in enc.src_ids]
        assert text[0] == "<sos>" and text[-1] == "<eos>"
        assert "<sep>" not in text
        assert len(text) == 2 + len(QUESTION.rstrip("?").split())

    def test_loads_and_strips_visual(self, tmp_path):
        cfg = SyntheticConfig(n_samples=2, seed=9, patches=4, dim=16)
        samples, hints = generate_synthetic(cfg, tmp_path)
        corpus = [tokenize(normalize(s.question), s.language) for s in samples]
        corpus += [tokenize(normalize(s.answer), s.language) for s in samples]
        vocab = build_vocab(corpus)
        encoded = prepare_samples(samples, hints, vocab,
                                  feature_dir=tmp_path / "features", hint_mode="none")
        for enc in encoded:
            assert enc.visual.shape == (4, 16)


class TestTrainDevSplit:
    def test_deterministic_and_disjoint(self):
        samples = list(range(20))
        a_train, a_dev = train_dev_split(samples, 0.1, seed=5)
        b_train, b_dev = train_dev_split(samples, 0.1, seed=5)
        assert (a_train, a_dev) == (b_train, b_dev)
        assert len(a_dev) == 2
        assert sorted(a_train + a_dev) == samples

    def test_minimum_one_each_side(self):
        train, dev = train_dev_split([1, 2], 0.01, seed=0)
        assert len(train) == 1 and len(dev) == 1

    def test_too_small(self):
        with pytest.raises(ValueError):
            train_dev_split([1], 0.5)


class TestAblationParameterCounts:
    def test_hint_modes_share_architecture(self):
        config = ModelConfig(src_vocab=40, tgt_vocab=40, embed_dim=16,
                             hidden_units=16, encoder_layers=1, decoder_layers=1,
                             max_positions=80, max_decode_len=4)
        counts = {ConvS2S(config, seed=s).parameter_count() for s in range(3)}
        assert len(counts) == 1


def run_cli(*argv):
    return main(list(argv))


class TestCliPipeline:
    def test_full_pipeline_exit_codes(self, tmp_path, capsys):
        data = tmp_path / "data"
        run = tmp_path / "run"
        assert run_cli("gen-data", "--out", str(data), "--n", "8", "--seed", "0",
                       "--patches", "4", "--dim", "16") == 0
        assert run_cli("build-vocab", "--dataset", str(data / "dataset.jsonl"),
                       "--hints", str(data / "hints.jsonl"),
                       "--out", str(data / "vocab.tsv")) == 0
        assert run_cli("prepare", "--dataset", str(data / "dataset.jsonl"),
                       "--hints", str(data / "hints.jsonl"),
                       "--vocab", str(data / "vocab.tsv"),
                       "--out", str(data / "prepared.jsonl"),
                       "--max-len", "64") == 0
        assert run_cli("train", "--dataset", str(data / "dataset.jsonl"),
                       "--hints", str(data / "hints.jsonl"),
                       "--features", str(data / "features"),
                       "--vocab", str(data / "vocab.tsv"),
                       "--out-dir", str(run), "--seed", "0",
                       "--epochs", "1", "--batch-size", "4",
                       "--embed", "16", "--hidden", "16",
                       "--enc-layers", "1", "--dec-layers", "1",
                       "--dropout-keep", "1.0", "--max-len", "64",
                       "--max-decode-len", "4", "--visual", "on") == 0
        assert (run / "best.ckpt").exists()
        assert (run / "train_log.jsonl").exists()
        assert (run / "run_config.json").exists()
        assert run_cli("predict", "--checkpoint", str(run / "best.ckpt"),
                       "--dataset", str(data / "dataset.jsonl"),
                       "--hints", str(data / "hints.jsonl"),
                       "--features", str(data / "features"),
                       "--vocab", str(data / "vocab.tsv"),
                       "--out", str(run / "predictions.jsonl"),
                       "--visual", "on", "--max-len", "64") == 0
        assert run_cli("evaluate", "--predictions", str(run / "predictions.jsonl"),
                       "--dataset", str(data / "dataset.jsonl"),
                       "--out", str(run / "report.json"),
                       "--histogram", str(run / "hist.json")) == 0
        assert run_cli("stats", "--predictions", str(run / "predictions.jsonl"),
                       "--dataset", str(data / "dataset.jsonl"),
                       "--out", str(run / "stats.json")) == 0
        samples = load_dataset(data / "dataset.jsonl")
        assert run_cli("export-attention", "--checkpoint", str(run / "best.ckpt"),
                       "--dataset", str(data / "dataset.jsonl"),
                       "--hints", str(data / "hints.jsonl"),
                       "--features", str(data / "features"),
                       "--vocab", str(data / "vocab.tsv"),
                       "--sample-id", samples[0].sample_id,
                       "--out-dir", str(run / "attention"),
                       "--visual", "on", "--max-len", "64") == 0
        capsys.readouterr()

        report = json.loads((run / "report.json").read_text())
        assert 0.0 <= report["f1"] <= 1.0
        hist = json.loads((run / "hist.json").read_text())
        assert all(len(bins) == 5 for bins in hist.values())
        assert sum(n for bins in hist.values() for n in bins) == 8
        stats = json.loads((run / "stats.json").read_text())
        assert set(stats) == {"overall", "per_language"}
        log_rows = [json.loads(l) for l in
                    (run / "train_log.jsonl").read_text().splitlines()]
        assert {r["split"] for r in log_rows} == {"train", "dev"}

    def test_exported_attention_artifacts(self, tmp_path, capsys):
        data = tmp_path / "data"
        run = tmp_path / "run"
        run_cli("gen-data", "--out", str(data), "--n", "4", "--seed", "1",
                "--patches", "4", "--dim", "16")
        run_cli("build-vocab", "--dataset", str(data / "dataset.jsonl"),
                "--hints", str(data / "hints.jsonl"), "--out", str(data / "vocab.tsv"))
        vocab = Vocabulary.load(data / "vocab.tsv")
        config = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab),
                             embed_dim=16, hidden_units=16,
                             encoder_layers=1, decoder_layers=2,
                             max_positions=80, max_decode_len=4)
        model = ConvS2S(config, seed=0)
        model.params["proj.b"].data[EOS_ID] = -1e9  # force a full-length decode
        run.mkdir()
        save_checkpoint(model, run / "best.ckpt")
        run_cli("export-attention", "--checkpoint", str(run / "best.ckpt"),
                "--dataset", str(data / "dataset.jsonl"),
                "--hints", str(data / "hints.jsonl"),
                "--vocab", str(data / "vocab.tsv"),
                "--sample-id", "s00000", "--out-dir", str(run / "att"),
                "--max-len", "64")
        capsys.readouterr()
        for layer in (0, 1):
            base = str(run / "att" / f"s00000_layer{layer}")
            csv_lines = open(base + ".csv").read().splitlines()
            weights = np.array([[float(v) for v in line.split(",")]
                                for line in csv_lines])
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
            labels = json.loads(open(base + ".labels.json").read())
            assert weights.shape == (len(labels["target"]), len(labels["source"]))
            blob = open(base + ".pgm", "rb").read()
            header, pixels = blob.split(b"\n255\n", 1)
            magic, dims = header.split(b"\n", 1)
            assert magic == b"P5"
            width, height = map(int, dims.split())
            assert (height, width) == weights.shape
            got = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
            np.testing.assert_array_equal(got, np.rint(weights * 255).astype(np.uint8))

    def test_evaluate_identical_files_perfect_scores(self, tmp_path, capsys):
        dataset = tmp_path / "d.jsonl"
        preds = tmp_path / "p.jsonl"
        answers = {"s1": "red box on the left", "s2": "two cups near the corner"}
        save_dataset(dataset, [QASample(sid, "i", "en", "whatever question", a)
                               for sid, a in answers.items()])
        save_predictions(preds, [(sid, a.split()) for sid, a in answers.items()])
        assert run_cli("evaluate", "--predictions", str(preds),
                       "--dataset", str(dataset)) == 0
        out = capsys.readouterr().out
        assert "F1 1.0000" in out
        assert "BLEU avg 1.0000" in out

    def test_prepare_reproduces_published_sequence(self, tmp_path, capsys):
        dataset = tmp_path / "d.jsonl"
        hints = tmp_path / "h.jsonl"
        save_dataset(dataset, [QASample("s1", "i1", "en", QUESTION, "pineapples")])
        save_hints(hints, {"s1": hint_set()})
        run_cli("build-vocab", "--dataset", str(dataset), "--hints", str(hints),
                "--out", str(tmp_path / "v.tsv"))
        assert run_cli("prepare", "--dataset", str(dataset), "--hints", str(hints),
                       "--vocab", str(tmp_path / "v.tsv"),
                       "--out", str(tmp_path / "prep.jsonl")) == 0
        capsys.readouterr()
        row = json.loads((tmp_path / "prep.jsonl").read_text().splitlines()[0])
        assert row["text"] == COMBINED_TEXT

    def test_unknown_subcommand_usage(self, capsys):
        code = run_cli("frobnicate")
        err = capsys.readouterr().err
        assert code != 0
        assert "usage" in err.lower()

    def test_train_requires_seed(self, tmp_path, capsys):
        code = run_cli("train", "--dataset", "x", "--vocab", "y", "--out-dir", "z")
        err = capsys.readouterr().err
        assert code != 0
        assert "--seed" in err

    def test_missing_input_names_path(self, tmp_path, capsys):
        code = run_cli("build-vocab", "--dataset", str(tmp_path / "ghost.jsonl"),
                       "--out", str(tmp_path / "v.tsv"))
        err = capsys.readouterr().err
        assert code == 1
        assert "ghost.jsonl" in err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        data = tmp_path / "data"
        run_cli("gen-data", "--out", str(data), "--n", "4", "--seed", "2",
                "--patches", "4", "--dim", "16")
        run_cli("build-vocab", "--dataset", str(data / "dataset.jsonl"),
                "--out", str(data / "vocab.tsv"))
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"learning_rate": 0.1}')  # the key is called "lr"
        code = run_cli("train", "--dataset", str(data / "dataset.jsonl"),
                       "--vocab", str(data / "vocab.tsv"),
                       "--out-dir", str(tmp_path / "run"), "--seed", "0",
                       "--config", str(cfg), "--hint-mode", "none")
        err = capsys.readouterr().err
        assert code == 1
        assert "learning_rate" in err

    def test_config_file_flag_precedence(self, tmp_path, capsys):
        data = tmp_path / "data"
        run_cli("gen-data", "--out", str(data), "--n", "6", "--seed", "3",
                "--patches", "4", "--dim", "16")
        run_cli("build-vocab", "--dataset", str(data / "dataset.jsonl"),
                "--hints", str(data / "hints.jsonl"), "--out", str(data / "vocab.tsv"))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 2, "embed": 16, "hidden": 16,
                                   "enc_layers": 1, "dec_layers": 1,
                                   "dropout_keep": 1.0, "max_len": 64,
                                   "max_decode_len": 4, "batch_size": 4}))
        out_dir = tmp_path / "run"
        assert run_cli("train", "--dataset", str(data / "dataset.jsonl"),
                       "--hints", str(data / "hints.jsonl"),
                       "--vocab", str(data / "vocab.tsv"),
                       "--out-dir", str(out_dir), "--seed", "0",
                       "--config", str(cfg), "--epochs", "1") == 0
        capsys.readouterr()
        run_config = json.loads((out_dir / "run_config.json").read_text())
        # the flag beats the config file; the config file beats the default
        assert run_config["options"]["epochs"] == 1
        assert run_config["options"]["embed"] == 16
        assert run_config["options"]["batch_size"] == 4
