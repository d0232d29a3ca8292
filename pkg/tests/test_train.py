import math

import numpy as np
import pytest

from alignkd import checkpoint
from alignkd import tensor as T
from alignkd.data import BatchLoader, DistillBatch, SynthSpec, synth_samples
from alignkd.errors import BadSchedule, EmptyDataset, NonFiniteLoss
from alignkd.losses import EmbedProjector, HeadProjector, LossConfig, Projectors
from alignkd.train import (
    METRICS_HEADER,
    TeacherCache,
    Trainer,
    TrainConfig,
    cosine_lr,
    evaluate,
    run_training,
    teacher_outputs,
)
from alignkd.vlm import ToyVLM, VlmConfig, load_model

STUDENT = VlmConfig(d_model=16, n_heads=2, n_layers=2, seed=1)
TEACHER = VlmConfig(d_model=32, n_heads=4, n_layers=2, seed=2)


@pytest.fixture(scope="module")
def samples():
    return synth_samples(SynthSpec(40, seed=21))


def make_trainer(cfg: TrainConfig, teacher=True):
    t = ToyVLM(TEACHER) if teacher else None
    return Trainer(ToyVLM(STUDENT), cfg, teacher=t)


# -- schedule ------------------------------------------------------------------


def test_cosine_lr_examples():
    assert cosine_lr(10, 1.0, 110, 10) == 1.0
    assert abs(cosine_lr(110, 1.0, 110, 10)) < 1e-15
    assert abs(cosine_lr(60, 1.0, 110, 10) - 0.5) < 1e-15
    assert cosine_lr(5, 1.0, 110, 10) == 0.5
    assert cosine_lr(0, 1.0, 110, 10) == 0.0
    with pytest.raises(BadSchedule):
        cosine_lr(0, 1.0, 10, 10)
    with pytest.raises(BadSchedule):
        cosine_lr(11, 1.0, 10, 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(accumulation_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_frac=0.6)
    cfg = TrainConfig(batch_size=2, accumulation_steps=4)
    assert cfg.effective_batch == 8


# -- train_step ----------------------------------------------------------------


class ExplodingTeacher(ToyVLM):
    def run(self, *args, **kwargs):
        raise AssertionError("teacher forward must not run")


def test_supervised_only_skips_teacher(samples):
    cfg = TrainConfig(steps=2, batch_size=4, losses=LossConfig.supervised_only())
    trainer = Trainer(ToyVLM(STUDENT), cfg, teacher=ExplodingTeacher(TEACHER))
    report = trainer.train_step(DistillBatch.from_samples(samples[:4]))
    assert report.total == report.l_sup
    assert report.l_attn_tv == report.l_v == report.l_rkld == 0.0


def test_kd_without_teacher_rejected():
    with pytest.raises(ValueError):
        Trainer(ToyVLM(STUDENT), TrainConfig())


def test_self_distillation_null(samples):
    cfg = TrainConfig(steps=1, batch_size=4, precision="f64", losses=LossConfig(k=4))
    model = ToyVLM(STUDENT)
    twin = ToyVLM(STUDENT, {k: T.Tensor(v.data.copy()) for k, v in model.params.items()})
    proj = Projectors(HeadProjector.identity(STUDENT.n_heads), EmbedProjector.identity(STUDENT.d_model))
    trainer = Trainer(model, cfg, teacher=twin, projectors=proj)
    report = trainer.train_step(DistillBatch.from_samples(samples[:4]))
    assert abs(report.l_attn_tv) <= 1e-12
    assert report.l_v == 0.0 and report.l_v_all == 0.0 and report.l_v_focus == 0.0
    assert abs(report.l_rkld) <= 1e-9
    assert report.l_sup > 0


def test_nonfinite_loss_names_the_term(samples):
    trainer = make_trainer(TrainConfig(steps=1, batch_size=2, losses=LossConfig(enable_v_focus=False)))
    trainer.projectors.p_v.bias.data[:] = np.nan
    with pytest.raises(NonFiniteLoss) as exc:
        trainer.train_step(DistillBatch.from_samples(samples[:2]))
    assert exc.value.term == "l_v_all"


def test_learning_rate_groups(samples):
    for stage, other in (("pretrain", 2e-5), ("finetune", 4e-5)):
        cfg = TrainConfig(steps=10, batch_size=4, warmup_frac=0.0, precision="f64", stage=stage, losses=LossConfig(k=4))
        trainer = make_trainer(cfg)
        groups = trainer.param_groups()
        assert set(n.split(".", 1)[1].split(".")[0] for n in groups["projector"]) == {"vision", "p_attn", "p_v"}
        before = {n: p.data.copy() for g in groups.values() for n, p in g.items()}
        trainer.train_step(DistillBatch.from_samples(samples[:4]))
        assert trainer.optimizer.last_step_sizes == {"projector": 1e-3, "other": other}
        # the first Adam step moves each coordinate by about lr * sign(grad)
        for gname, lr in (("projector", 1e-3), ("other", other)):
            for n, p in groups[gname].items():
                delta = np.abs(p.data - before[n])
                moved = delta[delta > 0]
                assert moved.size and np.all(moved <= lr * 1.0001), n
                assert np.median(moved) > 0.5 * lr, n


def _final_params(batch_size, accum, samples, steps=5):
    cfg = TrainConfig(steps=steps, batch_size=batch_size, accumulation_steps=accum, precision="f64",
                      lr_other_max=1e-3, losses=LossConfig(k=4, attn_block="all_plus_last"))
    trainer = make_trainer(cfg)
    run_training(trainer, samples)
    out = {f"model.{k}": v.data for k, v in trainer.student.params.items()}
    out.update({f"proj.{k}": v.data for k, v in trainer.projectors.named_parameters().items()})
    return out


def test_accumulation_matches_combined_batch(samples):
    a = _final_params(8, 1, samples)
    b = _final_params(2, 4, samples)
    worst = max(float(np.max(np.abs(a[k] - b[k]))) for k in a)
    assert worst <= 1e-6


def test_frozen_parameters_bit_identical(samples):
    trainer = make_trainer(TrainConfig(steps=5, batch_size=4, losses=LossConfig(k=4)))
    frozen = {k: v.tobytes() for k, v in trainer.student.frozen.arrays().items()}
    teacher = {k: v.data.tobytes() for k, v in trainer.teacher.params.items()}
    teacher_frozen = {k: v.tobytes() for k, v in trainer.teacher.frozen.arrays().items()}
    run_training(trainer, samples)
    assert frozen == {k: v.tobytes() for k, v in trainer.student.frozen.arrays().items()}
    assert teacher == {k: v.data.tobytes() for k, v in trainer.teacher.params.items()}
    assert teacher_frozen == {k: v.tobytes() for k, v in trainer.teacher.frozen.arrays().items()}


# -- runs, checkpoints, resume -------------------------------------------------


def _run(tmp, samples, steps=6, resume=None, cache=None, **kw):
    cfg = TrainConfig(steps=steps, batch_size=4, checkpoint_every=3, losses=LossConfig(k=4), **kw)
    trainer = Trainer(ToyVLM(STUDENT), cfg, teacher=ToyVLM(TEACHER), cache=cache)
    if resume:
        trainer.restore(resume)
    run_training(trainer, samples, tmp)
    return trainer


def test_steps_zero_writes_initial_checkpoint(tmp_path, samples):
    trainer = _run(tmp_path, samples, steps=0)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.akd", "metrics.csv"]
    assert (tmp_path / "metrics.csv").read_text() == ",".join(METRICS_HEADER) + "\n"
    model, header, _ = load_model(tmp_path / "final.akd", "f32")
    assert header["step"] == "0" and model.checksum() == ToyVLM(STUDENT).checksum()
    del trainer


def test_runs_are_byte_identical(tmp_path, samples):
    _run(tmp_path / "a", samples)
    _run(tmp_path / "b", samples)
    for name in ("final.akd", "step3.akd", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,l_sup,l_attn_tv,l_v_focus,l_v_all,l_v,l_rkld,total"
    assert len(lines) == 7


def test_resume_continues_exactly(tmp_path, samples):
    _run(tmp_path / "full", samples)
    # resume the same 6-step run from its step-3 checkpoint in a fresh directory
    _run(tmp_path / "resumed", samples, resume=tmp_path / "full" / "step3.akd")
    assert (tmp_path / "full" / "final.akd").read_bytes() == (tmp_path / "resumed" / "final.akd").read_bytes()
    full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
    resumed_rows = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
    assert resumed_rows == full_rows[:1] + full_rows[4:]
    # resuming a finished run changes nothing
    before = [(tmp_path / "full" / n).read_bytes() for n in ("final.akd", "metrics.csv")]
    _run(tmp_path / "full", samples, resume=tmp_path / "full" / "final.akd")
    assert [(tmp_path / "full" / n).read_bytes() for n in ("final.akd", "metrics.csv")] == before


def test_checkpoint_contents(tmp_path, samples):
    _run(tmp_path, samples, steps=3)
    header, tensors = checkpoint.read(tmp_path / "final.akd")
    assert header["kind"] == "student" and header["step"] == "3" and header["precision"] == "f32"
    assert any(k.startswith("proj.p_attn.") for k in tensors)
    assert any(k.startswith("opt.m.model.") for k in tensors)


def test_failed_checkpoint_write_leaves_nothing(tmp_path):
    target = tmp_path / "missing" / "x.akd"
    with pytest.raises(OSError):
        checkpoint.write(target, {"a": 1}, {"w": np.zeros(2, dtype=np.float32)})
    assert not (tmp_path / "missing").exists()


def test_teacher_cache_matches_live_teacher(tmp_path, samples):
    live = _run(tmp_path / "live", samples)
    cached = _run(tmp_path / "cached", samples, cache=TeacherCache(tmp_path / "cache"))
    assert (tmp_path / "live" / "metrics.csv").read_bytes() == (tmp_path / "cached" / "metrics.csv").read_bytes()
    files = list((tmp_path / "cache").iterdir())
    assert files and all(f.suffix == ".akd" for f in files)
    again = _run(tmp_path / "again", samples, cache=TeacherCache(tmp_path / "cache"))
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (tmp_path / "live" / "metrics.csv").read_bytes()
    del live, cached, again


def test_cache_records_match_batched_outputs(tmp_path, samples):
    teacher = ToyVLM(TEACHER).astype("f32")  # the disk format stores 32-bit floats
    batch = DistillBatch.from_samples(samples[:5])
    direct = teacher_outputs(teacher, batch, capture_last=True)
    cache = TeacherCache(tmp_path)
    teacher_outputs(teacher, batch, capture_last=True, cache=cache)
    from_disk = teacher_outputs(teacher, batch, capture_last=True, cache=TeacherCache(tmp_path))
    for name in ("attn_first", "vision", "logits", "attn_last"):
        assert np.array_equal(getattr(direct, name), getattr(from_disk, name))


def test_smoke_run_reduces_loss(samples):
    cfg = TrainConfig(steps=200, batch_size=4, lr_other_max=1e-3, losses=LossConfig(k=4))
    rows = run_training(make_trainer(cfg), samples)
    first, last = float(rows[0][-1]), float(rows[-1][-1])
    assert last < first


# -- evaluation ----------------------------------------------------------------


def test_evaluate_uniform_model(samples):
    model = ToyVLM(VlmConfig(d_model=16, n_heads=2, n_layers=2))
    model.params["final_ln.gain"].data[:] = 0
    model.params["final_ln.bias"].data[:] = 0
    out = evaluate(model, samples[:5])
    assert abs(out["cross_entropy"] - math.log(256)) < 1e-5


def test_evaluate_matches_logit_dump(samples):
    model = ToyVLM(STUDENT).astype("f64")
    subset = samples[:6]
    per_sample = []
    for s in subset:
        ids = s.prompt_ids + s.response_ids
        logits = model.run(s.image_patches, ids).logits.data[STUDENT.n_vision_tokens:]
        nll = []
        for t in range(len(s.prompt_ids) - 1, len(ids) - 1):
            row = logits[t]
            lse = row.max() + math.log(math.fsum(math.exp(v - row.max()) for v in row))
            nll.append(lse - row[ids[t + 1]])
        per_sample.append(math.fsum(nll) / len(nll))
    out = evaluate(model, subset, batch_size=4)
    assert abs(out["cross_entropy"] - np.mean(per_sample)) <= 1e-8
    with pytest.raises(EmptyDataset):
        evaluate(model, [])


def test_memorised_sample_exact_match(samples):
    one = [samples[0]]
    cfg = TrainConfig(steps=150, batch_size=1, lr_other_max=3e-3, lr_projector_max=3e-3, losses=LossConfig.supervised_only())
    trainer = Trainer(ToyVLM(STUDENT), cfg)
    run_training(trainer, one)
    assert evaluate(trainer.student, one)["exact_match"] == 1.0
