# tests/test_harness.py

import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from app import cli
from app.config import load_config, write_config
from app.datasim.folds import make_folds
from app.diffmath import DTYPE
from app.models.decoder import TextDecoder
from app.models.losses import (
    CombinedLossConfig,
    FocalConfig,
    focal_contrastive,
    numeric_alignment_loss,
    one_hot,
    total_loss,
)
from app.models.pipeline import GaitVLM
from app.numtext.vocab import default_vocabulary
from app.processing import decoding, worker
from app.processing.cv import (
    CONFIG_NAME,
    EMBEDDINGS_NAME,
    REPORT_NAME,
    ablation_variants,
    evaluate_run,
    resolve_dataset,
    run_ablation,
    run_cv,
)
from app.processing.decoding import (
    INTERPRETATIONS_NAME,
    decoder_config,
    decoder_corpus,
    interpret_run,
    run_decoder,
    split_held_out,
)
from app.processing.gradchecks import TOLERANCE, run_gradchecks
from app.processing.plots import emit_plots, emit_similarity, pca_2d, save_matrix, to_gray
from app.processing.trainer import CHECKPOINT_NAME, fit, prepare_fold
from app.utils import file_handler
from app.utils.errors import MissingArtifactsError


@pytest.fixture
def finished_run(small_cfg, tmp_path):
    run_dir = str(tmp_path / "run")
    return run_dir, run_cv(small_cfg, run_dir)


# --- cross-validation ---

def test_run_writes_artifacts(finished_run, small_cfg):
    run_dir, report = finished_run
    assert len(report.folds) == small_cfg.n_folds
    assert report.variant == "full"
    assert report.config == small_cfg.model_dump()
    for name in (CONFIG_NAME, REPORT_NAME, EMBEDDINGS_NAME, "dataset"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    assert report.folds[0].checkpoint == os.path.join("fold_0", CHECKPOINT_NAME)
    for fold in report.folds:
        assert os.path.exists(os.path.join(run_dir, fold.checkpoint))
        assert len(fold.loss_curve) == small_cfg.epochs
        assert 0.0 <= fold.metrics.accuracy <= 1.0
    stored = file_handler.read_json(os.path.join(run_dir, REPORT_NAME))
    assert stored["mean_accuracy"] == report.mean_accuracy


def test_runs_are_reproducible(finished_run, small_cfg, tmp_path):
    _, first = finished_run
    second = run_cv(small_cfg, str(tmp_path / "again"))
    assert [f.metrics for f in first.folds] == [f.metrics for f in second.folds]
    assert [f.loss_curve for f in first.folds] == [f.loss_curve for f in second.folds]


def test_run_without_directory(small_cfg):
    report = run_cv(small_cfg.model_copy(update={"n_folds": 2}))
    assert all(f.checkpoint is None for f in report.folds)


def test_evaluate_run_reproduces_fold_metrics(finished_run):
    run_dir, report = finished_run
    reloaded = evaluate_run(run_dir)
    assert sorted(reloaded) == [0, 1, 2]
    for fold in report.folds:
        assert reloaded[fold.fold] == fold.metrics
    assert list(evaluate_run(run_dir, folds=[1])) == [1]


def test_evaluate_run_needs_artifacts(finished_run, tmp_path):
    with pytest.raises(MissingArtifactsError):
        evaluate_run(str(tmp_path / "empty"))
    run_dir, _ = finished_run
    os.remove(os.path.join(run_dir, "fold_2", CHECKPOINT_NAME))
    with pytest.raises(MissingArtifactsError) as info:
        evaluate_run(run_dir)
    assert len(info.value.missing) == 1


def test_training_leaves_frozen_weights(small_cfg, recwarn):
    dataset = resolve_dataset(small_cfg)
    plan = make_folds(dataset, small_cfg.n_folds, small_cfg.seed)
    model = GaitVLM(small_cfg)
    frozen = model.frozen_state()
    before = {k: v.detach().clone() for k, v in model.trainable_parameters().items()}
    data = prepare_fold(small_cfg, dataset, plan, 0, model.text_encoder)
    curve = fit(model, data, small_cfg, seed=0)
    assert len(curve) == small_cfg.epochs
    for name, value in model.frozen_state().items():
        assert torch.equal(value, frozen[name]), name
    after = model.trainable_parameters()
    assert any(not torch.equal(after[k], before[k]) for k in before)
    assert not [w for w in recwarn if "requires_grad" in str(w.message)]


def test_only_trainable_tensors_receive_gradients(small_cfg):
    model = GaitVLM(small_cfg)
    gen = torch.Generator().manual_seed(0)
    clips = torch.randn(4, small_cfg.window, small_cfg.f_in, generator=gen, dtype=DTYPE)
    f_num = torch.randn(4, small_cfg.d, generator=gen, dtype=DTYPE)
    labels = torch.arange(4) % model.n_classes
    focal = FocalConfig(alpha=small_cfg.focal_alpha, gamma=small_cfg.focal_gamma, tau=small_cfg.tau)
    f_t = model.text_features()
    l_k = focal_contrastive(model.video_features(clips), f_t, one_hot(labels, model.n_classes), focal)
    l_gp = numeric_alignment_loss(f_num, f_t, labels, model.heads, small_cfg.tau)
    total_loss(l_k, l_gp, CombinedLossConfig(omega=small_cfg.omega)).backward()
    named = dict(model.named_parameters())
    with_grad = {n for n, p in named.items() if p.grad is not None and bool((p.grad != 0).any())}
    assert with_grad == set(model.trainable_parameters())
    assert all(n.startswith(("prompts.", "video.", "heads.")) for n in with_grad)
    for group in ("prompts.ctx", "prompts.proj_", "video.tokenizer.", "video.summary_", "video.global_tokens", "heads.num_", "heads.text_"):
        assert any(n.startswith(group) for n in with_grad), group
    frozen = [n for n in named if n.startswith(("text_encoder.", "vision_encoder."))]
    assert frozen and all(named[n].grad is None for n in frozen)


def test_ablation_variants(small_cfg, tmp_path):
    variants = ablation_variants(small_cfg)
    assert {name: v.variant_name() for name, v in variants.items()} == {
        "baseline": "baseline", "kapt": "kapt", "nte": "nte", "full": "full",
    }
    run_dir = str(tmp_path / "ablation")
    reports = run_ablation(small_cfg.model_copy(update={"n_folds": 2, "epochs": 1}), run_dir)
    assert sorted(reports) == ["baseline", "full", "kapt", "nte"]
    summary = file_handler.read_json(os.path.join(run_dir, "ablation.json"))
    assert sorted(summary) == sorted(reports)
    for name, report in reports.items():
        assert report.variant == name
        assert os.path.exists(os.path.join(run_dir, name, REPORT_NAME))


# --- plots ---

def test_gray_mapping():
    assert to_gray(np.array([-1.0, 0.0, 1.0])).tolist() == [0, 128, 255]


def test_png_matches_matrix(tmp_path):
    matrix = np.array([[1.0, 0.2, -0.4], [0.2, 1.0, 0.5], [-0.4, 0.5, 1.0]])
    csv_path, png_path = save_matrix(matrix, [-1.0, 0.0, 1.0], str(tmp_path), "m")
    with Image.open(png_path) as img:
        assert img.mode == "L"
        assert np.array_equal(np.array(img), to_gray(matrix))
    rows = file_handler.read_csv(csv_path)
    assert rows[0] == ["value", "-1.0", "0.0", "1.0"]
    assert float(rows[2][3]) == 0.5


def test_emit_similarity(small_cfg, tmp_path):
    written = emit_similarity(str(tmp_path), small_cfg, points=11)
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["similarity_map.csv", "similarity_map.png", "similarity_map_digits.csv", "similarity_map_digits.png"]
    with Image.open(tmp_path / "similarity_map.png") as img:
        assert img.size == (11, 11)


def test_pca_sign_is_fixed():
    features = np.random.default_rng(0).normal(size=(12, 5))
    coords = pca_2d(features)
    assert coords.shape == (12, 2)
    assert np.allclose(pca_2d(-features), -coords, atol=1e-10)


def test_emit_plots(finished_run, small_cfg):
    run_dir, report = finished_run
    emit_plots(run_dir)
    pca = file_handler.read_csv(os.path.join(run_dir, "pca_embeddings.csv"))
    assert pca[0] == ["pc1", "pc2", "label"]
    assert len(pca) - 1 == len(np.load(os.path.join(run_dir, EMBEDDINGS_NAME))["labels"])
    curves = file_handler.read_csv(os.path.join(run_dir, "loss_curves.csv"))
    assert len(curves) - 1 == small_cfg.epochs * small_cfg.n_folds
    assert float(curves[1][2]) == report.folds[0].loss_curve[0]


def test_emit_plots_needs_a_run(tmp_path):
    with pytest.raises(MissingArtifactsError):
        emit_plots(str(tmp_path))


# --- decoder experiment ---

def test_decoder_corpus_size_and_combinations(small_cfg):
    stats, corpus = decoder_corpus(small_cfg)
    combos = {s.combination for s in corpus}
    assert len(combos) <= small_cfg.decoder_combinations
    assert len(corpus) == small_cfg.decoder_parameter_sets * min(small_cfg.decoder_sentences_per_set, len(combos))
    assert all(pid in stats.mean for c in combos for pid in c.ids)
    assert decoder_corpus(small_cfg) == (stats, corpus)


def test_held_out_split(small_cfg):
    _, corpus = decoder_corpus(small_cfg)
    train, held = split_held_out(corpus, seed=0)
    assert len(train) + len(held) == len(corpus)
    assert len(held) == max(1, round(0.1 * len(corpus)))
    assert split_held_out(corpus, seed=0) == (train, held)


def test_run_decoder(small_cfg):
    outcome = run_decoder(small_cfg, n_samples=2)
    summary = outcome.summary()
    assert 0.0 <= summary["fidelity"] <= 1.0
    assert len(summary["loss_curve"]) == small_cfg.decoder_epochs
    assert len(summary["samples"]) == 2
    assert summary["n_train"] > summary["n_held_out"] > 0


def test_interpret_run(finished_run, small_cfg):
    run_dir, _ = finished_run
    outcome = run_decoder(small_cfg, n_samples=0)
    interpretations = interpret_run(run_dir, small_cfg, outcome.model)
    assert list(interpretations) == ["normal", "slight", "mild", "moderate"]
    assert file_handler.read_json(os.path.join(run_dir, INTERPRETATIONS_NAME)) == interpretations


def test_interpret_run_uses_the_decoder_stats(finished_run, small_cfg, monkeypatch):
    run_dir, _ = finished_run
    outcome = run_decoder(small_cfg, n_samples=0)
    seen = []

    def capture(f_t, bank, heads, model, names, **kwargs):
        seen.append((bank, kwargs["stats"]))
        return {name: ["-"] for name in names}

    monkeypatch.setattr(decoding, "interpret_classes", capture)
    interpret_run(run_dir, small_cfg, outcome.model, stats=outcome.stats)
    interpret_run(run_dir, small_cfg, outcome.model)
    (decoder_bank, decoder_stats), (fold_bank, fold_stats) = seen
    assert decoder_stats is outcome.stats
    assert fold_stats is not outcome.stats
    assert decoder_bank.sentences == fold_bank.sentences
    assert not torch.equal(decoder_bank.features[0], fold_bank.features[0])


def test_interpret_run_needs_a_checkpoint(small_cfg, tmp_path):
    decoder = TextDecoder(default_vocabulary(), decoder_config(small_cfg), d_in=small_cfg.d)
    with pytest.raises(MissingArtifactsError):
        interpret_run(str(tmp_path), small_cfg, decoder)


# --- gradient checks ---

def test_numeric_and_ordinal_gradients(small_cfg):
    worst = run_gradchecks(small_cfg, points=1, losses=("numeric", "ordinal"), max_entries=2)
    assert set(worst) == {"numeric", "ordinal"}
    assert all(err < TOLERANCE for err in worst.values()), worst


def test_unknown_objective(small_cfg):
    with pytest.raises(ValueError):
        run_gradchecks(small_cfg, points=1, losses=("hinge",))


@pytest.mark.slow
def test_every_objective_passes_gradcheck(small_cfg):
    worst = run_gradchecks(small_cfg, points=10)
    assert all(err < TOLERANCE for err in worst.values()), worst


# --- command line ---

def test_cli_gen_data(tmp_path, capsys):
    out = str(tmp_path / "data")
    assert cli.main(["gen-data", "--out", out, "--seed", "2", "--task", "dementia_group"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["subjects"] == 60
    assert os.path.isdir(out)


def test_cli_train_and_eval(small_cfg, tmp_path, capsys):
    config_path = write_config(small_cfg, str(tmp_path / "small.env"))
    run_dir = str(tmp_path / "run")
    assert cli.main(["train", "--config", config_path, "--run", run_dir, "--no-nte"]) == 0
    trained = json.loads(capsys.readouterr().out)
    assert trained["variant"] == "kapt"
    assert load_config(os.path.join(run_dir, CONFIG_NAME)).use_nte is False
    assert cli.main(["eval", "--run", run_dir, "--fold", "0"]) == 0
    evaluated = json.loads(capsys.readouterr().out)
    assert list(evaluated["folds"]) == ["0"]
    assert os.path.exists(os.path.join(run_dir, "eval.json"))


def test_cli_failure_is_a_json_record(tmp_path, capsys):
    assert cli.main(["eval", "--run", str(tmp_path)]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "MissingArtifactsError"


def test_cli_bad_config_file(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "nope.env")]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_cli_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--seed", "abc"])
    assert info.value.code == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ArgumentError"


# --- background worker ---

def _overrides(cfg):
    return {k: v for k, v in cfg.model_dump().items() if v is not None}


def test_worker_runs_a_queued_item(small_cfg, run_root):
    item = {"run_id": "run-a", "overrides": _overrides(small_cfg.model_copy(update={"n_folds": 2, "epochs": 1}))}
    assert worker.process_single_run(item) is True
    status = file_handler.read_json(os.path.join(file_handler.get_run_dir("run-a"), "status.json"))
    assert status["state"] == "done"
    assert set(status["mean_accuracy"]) == {"full"}


def test_worker_config_error_is_final(run_root):
    assert worker.process_single_run({"run_id": "run-b", "overrides": {"d": 10}}) is True
    status = file_handler.read_json(os.path.join(file_handler.get_run_dir("run-b"), "status.json"))
    assert status["state"] == "failed"
    assert status["error"] == "ConfigError"


# --- full-scale acceptance ---

@pytest.mark.slow
def test_default_run_separates_classes(tmp_path):
    report = run_cv(load_config(), str(tmp_path / "default"))
    assert report.mean_accuracy >= 0.90
    assert report.mean_macro_f1 >= 0.85
    assert evaluate_run(str(tmp_path / "default"), folds=[0])[0] == report.folds[0].metrics


@pytest.mark.slow
def test_inseparable_cohort_is_at_chance():
    report = run_cv(load_config(overrides={"separability": 0.0}))
    assert abs(report.mean_accuracy - 0.25) <= 0.10


@pytest.mark.slow
def test_decoder_fidelity_at_full_scale():
    cfg = load_config()
    outcome = run_decoder(cfg)
    assert outcome.n_train + outcome.n_held_out >= 5000
    assert outcome.fidelity >= 0.95

