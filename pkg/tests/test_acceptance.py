"""Acceptance gate: twelve end-to-end criteria, one test each.

pytest -v prints the PASS/FAIL verdict per criterion; each test also
appends one measured-value line to acceptance_report.txt at the repo
root (pytest's fd-level capture swallows stdout, so a file is the
durable record). Criteria 6-10 and 12 share desk-scale training runs
through session fixtures; the first test that needs them pays the
training cost, later ones reuse the artifacts.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from qrestore.distill import (
    DistillSite,
    alignment_report,
    decoder_deviation_profile,
    kd_loss,
    make_teacher,
)
from qrestore.metrics import recovery_percent
from qrestore.model import ChannelGate, DegradationGate, ModelConfig, build_model, count_parameters, layer_inventory, shape_trace
from qrestore.quantsim import QuantParams, calibrate_max, fake_quantize, fake_quantize_ste, quant_max
from qrestore.reweight import LOG_WEIGHT_FLOOR, MagnitudeBalancer
from qrestore.trainer import (
    ModelConfig as _MC,  # noqa: F401  (re-export sanity: trainer shares the model config)
    TrainConfig,
    load_checkpoint,
    load_teacher_model,
    make_data,
    train,
)

# Desk-scale training constants shared by criteria 6-10 and 12. The
# held-out set has 64 patches from images never seen in training; all
# student runs share one seed. Noise level 0.30 keeps the reconstruction
# gradient noisy enough that the feature anchor pays off at this budget.
TEACHER_STEPS = 6000
TEACHER_LR = 2e-4
STUDENT_STEPS = 2000
STUDENT_LR = 2e-4
SKIP_SWEEP_STEPS = 1200
SHARED_SEED = 1
DATA_SEED = 0
NOISE_SIGMA = 0.30
N_IMAGES = 16
DECODER_SITE = "decoder:1"

torch.set_num_threads(1)


REPORT_PATH = Path(__file__).resolve().parent.parent / "acceptance_report.txt"
_report_started = False


def announce(n: int, detail: str) -> None:
    global _report_started
    line = f"[criterion {n:02d}] {detail}"
    with open(REPORT_PATH, "a" if _report_started else "w") as fh:
        fh.write(line + "\n")
    _report_started = True
    print(f"\n{line}", file=sys.__stdout__, flush=True)


def desk_config(**kw) -> TrainConfig:
    d = dict(
        steps=STUDENT_STEPS,
        lr=STUDENT_LR,
        seed=SHARED_SEED,
        batch_size=8,
        patch=64,
        log_every=200,
        recon_loss="l1_ssim",
        data_seed=DATA_SEED,
        task="gaussian_noise",
        task_params={"sigma": NOISE_SIGMA},
        n_images=N_IMAGES,
        image_size=160,
        val_patches=64,
        model=ModelConfig(scale_factor=0.25),
        calib_batches=16,
    )
    d.update(kw)
    return TrainConfig(**d)


def timed_train(cfg: TrainConfig, out: Path, teacher=None):
    t0 = time.time()
    manifest = train(cfg, out, teacher_checkpoint=teacher)
    return manifest, time.time() - t0


def final_psnr(manifest) -> float:
    return manifest.metrics["final"]["psnr_db"]


@pytest.fixture(scope="session")
def work(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def teacher_run(work):
    cfg = desk_config(regime="fp32", steps=TEACHER_STEPS, lr=TEACHER_LR, run_name="teacher")
    manifest, wall = timed_train(cfg, work / "teacher")
    return {"manifest": manifest, "wall": wall, "checkpoint": manifest.checkpoint}


@pytest.fixture(scope="session")
def desk_runs(work, teacher_run):
    """The criterion-6 cells: PTQ, QAT, QDR at 8-bit on the shared seed."""
    tck = teacher_run["checkpoint"]
    runs = {"teacher": teacher_run["manifest"]}
    walls = {"teacher": teacher_run["wall"]}
    for name, cfg in (
        ("ptq", desk_config(regime="ptq", bits=8, run_name="ptq")),
        ("qat", desk_config(regime="qat", bits=8, run_name="qat")),
        ("qdr", desk_config(regime="qdr", bits=8, run_name="qdr")),
    ):
        manifest, wall = timed_train(cfg, work / name, teacher=tck)
        runs[name] = manifest
        walls[name] = wall
    return {"runs": runs, "walls": walls, "teacher_checkpoint": tck}


# ---------------------------------------------------------------------------


def test_criterion_01_quantizer_exactness():
    started = time.time()
    gen = torch.Generator().manual_seed(2024)
    n_tensors = 1000
    for bits in (2, 4, 8):
        qm = quant_max(bits)
        for i in range(n_tensors):
            scale_mag = 10.0 ** float(torch.empty((), ).uniform_(-3, 2, generator=gen))
            x = (torch.rand(256, generator=gen) * 2 - 1) * scale_mag
            params = calibrate_max(x, bits)
            q = fake_quantize(x, params)
            scale = params.scales

            # grid membership: q must be an integer code times the scale
            codes = torch.round(q / scale)
            assert codes.abs().max() <= qm
            assert torch.equal(codes * scale, q)

            # idempotence under the same parameters
            assert torch.equal(fake_quantize(q, params), q)

            # monotonicity on the sorted tensor
            qs = fake_quantize(torch.sort(x).values, params)
            assert bool((qs[1:] >= qs[:-1]).all())

            # error bound inside the clamp range
            inside = x.abs() <= qm * scale
            err = (q - x).abs()[inside]
            assert bool((err <= scale * (0.5 + 1e-5)).all())

            # single-channel input: per-channel and per-tensor agree exactly
            if i < 100:
                w = x.reshape(1, -1)
                pc = calibrate_max(w, bits, per_channel=True, channel_axis=0)
                pt = calibrate_max(w, bits)
                assert torch.equal(pc.scales.reshape(()), pt.scales.reshape(()))
                assert torch.equal(fake_quantize(w, pc), fake_quantize(w, pt))
    elapsed = time.time() - started
    assert elapsed < 60.0
    announce(1, f"grid/idempotence/monotonicity/error-bound/equivalence on "
                f"{n_tensors} tensors x bits (2,4,8) in {elapsed:.1f}s (< 60s)")


def test_criterion_02_gradient_fidelity():
    started = time.time()
    torch.manual_seed(7)
    model = build_model(ModelConfig(scale_factor=0.25)).double().eval()
    # the output head is zero-initialized (exact identity); re-randomize it
    # so reconstruction gradients reach the interior parameters
    with torch.no_grad():
        for p in model.out_proj.parameters():
            p.normal_(0.0, 0.05)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    y = torch.rand(2, 3, 32, 32, dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        return (model(x).output - y).pow(2).mean()

    loss = loss_value()
    loss.backward()

    probes = []  # (label, parameter, flat index)
    rng = np.random.default_rng(11)
    for name, module in model.named_modules():
        if isinstance(module, DegradationGate):
            probes.append((f"{name}.deg_scale", module.deg_scale, 0))
            probes.append((f"{name}.skip_scale", module.skip_scale, 0))
    se_params = [
        (f"{n}.weight", m.expand.weight) for n, m in model.named_modules() if isinstance(m, ChannelGate)
    ]
    for label, p in se_params[:3]:
        probes.append((label, p, int(rng.integers(p.numel()))))
    conv_params = [("stem.weight", model.stem.weight), ("out_proj.weight", model.out_proj.weight)]
    for label, p in conv_params:
        for _ in range(3):
            probes.append((label, p, int(rng.integers(p.numel()))))

    h = 1e-4
    worst = 0.0
    for label, p, idx in probes:
        flat = p.detach().reshape(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
        up = loss_value().item()
        with torch.no_grad():
            flat[idx] = orig - h
        down = loss_value().item()
        with torch.no_grad():
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        ad = p.grad.reshape(-1)[idx].item()
        rel = abs(fd - ad) / max(abs(ad), 1e-8)
        worst = max(worst, rel)
        assert rel < 1e-3, f"{label}[{idx}]: fd={fd} autodiff={ad} rel={rel}"

    # straight-through contract: gradient equals the in-range indicator exactly
    gen = torch.Generator().manual_seed(3)
    for bits in (2, 4, 8):
        t = (torch.rand(512, generator=gen) * 4 - 2).requires_grad_(True)
        params = QuantParams(scales=torch.tensor([0.05]), bits=bits, channel_axis=None)
        fake_quantize_ste(t, params).sum().backward()
        mask = ((t / 0.05).abs() <= quant_max(bits)).double()
        assert torch.equal(t.grad.double(), mask)
    elapsed = time.time() - started
    assert elapsed < 120.0
    announce(2, f"{len(probes)} finite-difference probes, worst rel err {worst:.2e} (< 1e-3); "
                f"STE gradient exact; {elapsed:.1f}s (< 2 min)")


def test_criterion_03_architecture_conformance():
    started = time.time()
    model = build_model(ModelConfig())
    n = count_parameters(model)
    assert abs(n - 4.01e6) / 4.01e6 < 0.10

    rows = dict(shape_trace(model, size=256))
    expected = {
        "input": (1, 3, 256, 256),
        "encoder1": (1, 64, 256, 256),
        "encoder2": (1, 96, 128, 128),
        "encoder3": (1, 128, 64, 64),
        "bottleneck": (1, 256, 32, 32),
        "decoder3": (1, 128, 64, 64),
        "decoder2": (1, 96, 128, 128),
        "decoder1": (1, 64, 256, 256),
        "output": (1, 3, 256, 256),
        "deg_map1": (1, 1, 256, 256),
        "deg_map2": (1, 1, 128, 128),
        "deg_map3": (1, 1, 64, 64),
    }
    for key, shape in expected.items():
        assert rows[key] == shape, f"{key}: {rows[key]} != {shape}"

    inventory = layer_inventory(model)
    allowed = {"Conv2d", "ConvTranspose2d", "BatchNorm2d", "ReLU", "Sigmoid", "AdaptiveAvgPool2d"}
    assert inventory <= allowed, inventory - allowed
    elapsed = time.time() - started
    assert elapsed < 60.0
    announce(3, f"{n:,} params (within 10% of 4.01M); 256x256 shape trace matches; "
                f"inventory {sorted(inventory)}; {elapsed:.1f}s (< 1 min)")


def test_criterion_04_balancer_fidelity():
    started = time.time()

    # (a) symmetric calibration: equal mean norms give log(1/2) exactly,
    # and the smoothing ratio starts at 1 up to the documented eps
    # (s = sqrt(g / (g + 1e-12)), so "exactly 1" is 1 within 1e-12).
    bal = MagnitudeBalancer()
    bal.initialize([1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0])
    assert bal.log_gain_rec.item() == math.log(0.5)
    assert bal.log_gain_kd.item() == math.log(0.5)
    assert abs(bal.smoothing_ratio() - 1.0) < 1e-12

    # (b) EMA geometric convergence, closed form to 1e-12
    mu = 0.9
    bal_b = MagnitudeBalancer(mu=mu, refresh_interval=1)
    bal_b.initialize([4.0], [16.0])
    target = 2.0
    for k in range(1, 201):
        bal_b.begin_step()
        bal_b.refresh(target, target)
        expect = mu ** k * 4.0 + (1 - mu ** k) * target
        assert abs(bal_b.ema_grad_rec.item() - expect) < 1e-12
    assert abs(bal_b.ema_grad_rec.item() - target) < mu ** 200 * 2.0 + 1e-12

    # (c)+(d) 5k-step adversarial stress: weights stay positive, the log
    # floor holds after every update, refreshes land exactly on T_g
    # boundaries
    interval = 50
    bal_c = MagnitudeBalancer(refresh_interval=interval)
    bal_c.initialize([1.0], [1.0])
    opt = torch.optim.SGD(bal_c.parameters(), lr=0.5)
    gen = torch.Generator().manual_seed(99)
    refresh_steps = []
    for _ in range(5000):
        t = bal_c.begin_step()
        if bal_c.needs_refresh():
            refresh_steps.append(t)
            spike = float(torch.rand((), generator=gen)) * 1e4 + 1e-8
            bal_c.refresh(spike, 1.0 / spike)
        l_rec = torch.rand((), generator=gen, dtype=torch.float64) * 50
        l_kd = torch.rand((), generator=gen, dtype=torch.float64) * 50
        total, info = bal_c.combine(l_rec, l_kd)
        assert info["weight_rec"] > 0.0 and info["weight_kd"] > 0.0
        opt.zero_grad()
        total.backward()
        bal_c.clip_gradients()
        opt.step()
        bal_c.apply_floor()
        assert bal_c.log_gain_rec.item() >= LOG_WEIGHT_FLOOR
        assert bal_c.log_gain_kd.item() >= LOG_WEIGHT_FLOOR
    assert refresh_steps == list(range(interval, 5001, interval))
    assert int(bal_c.refreshes) == 100
    elapsed = time.time() - started
    assert elapsed < 120.0
    announce(4, f"log(1/2) init exact, s(0)=1 within 1e-12, EMA closed form to 1e-12, "
                f"5k-step stress positive+floored, {len(refresh_steps)} refreshes on "
                f"boundaries; {elapsed:.1f}s (< 2 min)")


def test_criterion_05_self_distillation_null():
    started = time.time()
    torch.manual_seed(5)
    model = build_model(ModelConfig(scale_factor=0.25)).eval()
    teacher = make_teacher(model, student=model)
    sites = [DistillSite("bottleneck"), DistillSite("decoder", 3), DistillSite("decoder", 2),
             DistillSite("decoder", 1), DistillSite("output")]
    gen = torch.Generator().manual_seed(55)
    probes = 0
    for _ in range(8):
        x = torch.rand(2, 3, 64, 64, generator=gen)
        with torch.no_grad():
            s_trace = model(x)
        t_trace = teacher.trace(x)
        for site in sites:
            assert kd_loss(s_trace, t_trace, site).item() == 0.0
            probes += 1
    elapsed = time.time() - started
    assert elapsed < 60.0
    announce(5, f"distillation loss identically 0.0 at {probes} site probes "
                f"(8 batches x 5 sites); {elapsed:.1f}s (< 1 min)")


def test_criterion_06_regime_ordering(desk_runs):
    runs, walls = desk_runs["runs"], desk_runs["walls"]
    p_ptq, p_qat, p_qdr = final_psnr(runs["ptq"]), final_psnr(runs["qat"]), final_psnr(runs["qdr"])
    n_val = runs["qdr"].metrics["final"]["n_samples"]
    total_wall = sum(walls.values())

    assert n_val >= 64
    assert p_qdr > p_qat > p_ptq, f"ordering violated: qdr={p_qdr:.3f} qat={p_qat:.3f} ptq={p_ptq:.3f}"
    assert p_qdr - p_qat >= 0.1, f"qdr-qat margin {p_qdr - p_qat:.3f} dB < 0.1 dB"
    assert total_wall <= 1800.0, f"criterion-6 training took {total_wall:.0f}s (> 30 min)"
    announce(6, f"psnr ptq={p_ptq:.3f} < qat={p_qat:.3f} < qdr={p_qdr:.3f} dB "
                f"(qdr-qat={p_qdr - p_qat:.3f} >= 0.1) on {n_val} held-out patches; "
                f"wall {total_wall:.0f}s (<= 30 min)")


def test_criterion_07_site_ordering(work, desk_runs):
    cfg = desk_config(regime="qdr", bits=8, distill_site=DECODER_SITE, run_name="qdr-decoder")
    manifest, _ = timed_train(cfg, work / "qdr_decoder", teacher=desk_runs["teacher_checkpoint"])
    p_bottleneck = final_psnr(desk_runs["runs"]["qdr"])
    p_decoder = final_psnr(manifest)
    assert p_bottleneck >= p_decoder, (
        f"bottleneck site {p_bottleneck:.3f} dB < decoder site {p_decoder:.3f} dB"
    )
    announce(7, f"bottleneck-site qdr {p_bottleneck:.3f} dB >= {DECODER_SITE}-site "
                f"qdr {p_decoder:.3f} dB (identical budgets)")


def test_criterion_08_balancer_ordering(work, desk_runs):
    cfg = desk_config(
        regime="qat_kd_fixed", bits=8, balancer="fixed", fixed_kd_weight=1.0, run_name="kd-fixed"
    )
    manifest, _ = timed_train(cfg, work / "kd_fixed", teacher=desk_runs["teacher_checkpoint"])
    p_lmr = final_psnr(desk_runs["runs"]["qdr"])
    p_fixed = final_psnr(manifest)
    assert p_lmr >= p_fixed, f"learned balancer {p_lmr:.3f} dB < fixed weight {p_fixed:.3f} dB"
    announce(8, f"learned balancer {p_lmr:.3f} dB >= fixed-weight {p_fixed:.3f} dB "
                f"(identical budgets)")


def test_criterion_09_gating_ordering(work, teacher_run):
    psnrs = {}
    for mode in ("plain", "degmap", "gated"):
        cfg = desk_config(
            regime="qat",
            bits=8,
            steps=SKIP_SWEEP_STEPS,
            model=ModelConfig(scale_factor=0.25, skip_mode=mode),
            run_name=f"skip-{mode}",
        )
        manifest, _ = timed_train(cfg, work / f"skip_{mode}", teacher=teacher_run["checkpoint"])
        psnrs[mode] = final_psnr(manifest)
    assert psnrs["plain"] <= psnrs["degmap"] <= psnrs["gated"], psnrs
    announce(9, "skip-connection sweep monotone: plain {plain:.3f} <= degmap {degmap:.3f} "
                "<= gated {gated:.3f} dB".format(**psnrs))


@pytest.fixture(scope="session")
def lowbit_runs(work, teacher_run):
    """4-bit PTQ and QDR checkpoints for the alignment criterion.

    8-bit PTQ keeps the teacher's features nearly intact (it IS the
    teacher, coarsened), which makes the misalignment comparison
    degenerate; the low-bit regime is where post-training quantization
    visibly wrecks features and trained distillation re-aligns them.
    """
    tck = teacher_run["checkpoint"]
    out = {}
    for name, cfg in (
        ("ptq4", desk_config(regime="ptq", bits=4, run_name="ptq4")),
        ("qdr4", desk_config(regime="qdr", bits=4, run_name="qdr4")),
    ):
        manifest, _ = timed_train(cfg, work / name, teacher=tck)
        out[name] = manifest
    return out


def test_criterion_10_alignment_report(desk_runs, lowbit_runs):
    started = time.time()
    teacher = make_teacher(load_teacher_model(desk_runs["teacher_checkpoint"]))
    probe = make_data(desk_config()).eval_batch.degraded[:16]

    divergence = {}
    students = {}
    for name in ("ptq4", "qdr4"):
        students[name], _ = load_checkpoint(lowbit_runs[name].checkpoint)
        rep = alignment_report(students[name], teacher, probe)
        divergence[name] = rep["sites"]["bottleneck"]["divergence"]
    assert divergence["qdr4"] < divergence["ptq4"], divergence

    ptq_profile = decoder_deviation_profile(students["ptq4"], teacher, probe)
    assert all(b >= a * (1 - 1e-9) for a, b in zip(ptq_profile, ptq_profile[1:])), ptq_profile

    elapsed = time.time() - started
    assert elapsed < 300.0
    announce(10, f"bottleneck divergence qdr4 {divergence['qdr4']:.4f} < ptq4 "
                 f"{divergence['ptq4']:.4f}; 4-bit ptq decoder deviation non-decreasing "
                 f"{[round(v, 4) for v in ptq_profile]}; {elapsed:.1f}s (< 5 min)")


def test_criterion_11_recovery_arithmetic():
    value = recovery_percent(28.60, 29.64)
    assert round(value, 2) == 96.49
    announce(11, f"recovery(28.60, 29.64) = {value:.4f}% -> 96.49% at two decimals")


def test_criterion_12_reproducibility(work, desk_runs):
    manifest = desk_runs["runs"]["qdr"]
    rerun_cfg = manifest.train_config()
    rerun, _ = timed_train(rerun_cfg, work / "qdr_rerun", teacher=manifest.teacher_checkpoint)
    delta = abs(final_psnr(rerun) - final_psnr(manifest))
    assert delta <= 0.01, f"re-run differs by {delta:.5f} dB (> 0.01)"
    announce(12, f"qdr re-run from manifest: |delta psnr| = {delta:.6f} dB (<= 0.01)")
