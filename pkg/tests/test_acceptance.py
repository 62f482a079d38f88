"""End-to-end acceptance criteria.

Each test prints one `[PASS]/[FAIL] criterion N` line. Criteria 7-9 train
two small checkpoints (roughly 10 minutes each on one CPU core); the rest
run in seconds. Run only the fast ones with `-k "not heavy"`.
"""

import time

import numpy as np
import pytest
import torch

from cdpir.geometry import (
    GeometryKind,
    ImageGrid,
    Projector,
    default_geometry,
    subsample_views,
)
from cdpir.interpolant import (
    InterpolantSchedule,
    SamplerConfig,
    gaussian_score,
    gaussian_velocity_field,
    reverse_sample,
    velocity_to_score,
    velocity_to_score_alt,
)
from cdpir.metrics import psnr
from cdpir.model import ModelConfig, TrainConfig, build_model, train, velocity_loss
from cdpir.reconstruct import CdpirConfig, cdpir_reconstruct
from cdpir.simulate import (
    DOMAINS,
    NoiseKind,
    NoiseModel,
    gen_phantom,
    simulate_sinogram,
)
from cdpir.solver import AsdPocsConfig, SartSystem, asd_pocs_itv, os_sart_pass, solve_lambda_tv

SCHEDULES = [InterpolantSchedule(k) for k in ("linear", "gvp", "vp")]
GVP = InterpolantSchedule("gvp")

# shared configuration for the reconstruction criteria (7-9)
IMAGE_SIZE = 64
N_VIEWS_FULL = 246
N_VIEWS_SPARSE = 55
N_DET = 128
NOISE = NoiseModel(kind=NoiseKind.POISSON, i0=2e3, atten_scale=0.05)
TRAIN_ITERS = 2000
TRAIN_PHANTOMS_PER_DOMAIN = 100
PATCH_SIZE = 4
DC_CONFIG = AsdPocsConfig(p_outer=10, q_tv=1, k_subsets=5)
INIT_CONFIG = AsdPocsConfig(init_iters=30, k_subsets=5)
# out-of-distribution runs lean on the prior: weaker, less frequent data
# consistency so the learned prior (not the data term) dominates
OOD_DC_CONFIG = AsdPocsConfig(p_outer=3, q_tv=1, k_subsets=5)
OOD_DC_CADENCE = 2


def report(criterion: int, description: str, ok: bool, detail: str = ""):
    tag = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\n[{tag}] criterion {criterion}: {description}{suffix}")
    assert ok, f"criterion {criterion}: {description}{suffix}"


@pytest.fixture(scope="session")
def desk_grid():
    return ImageGrid(IMAGE_SIZE, IMAGE_SIZE, 1.0)


@pytest.fixture(scope="session")
def sparse_projector(desk_grid):
    geom = default_geometry(desk_grid, GeometryKind.FAN_FLAT,
                            n_det=N_DET, n_views=N_VIEWS_FULL)
    return Projector(subsample_views(geom, N_VIEWS_SPARSE), desk_grid)


@pytest.fixture(scope="session")
def training_stack(desk_grid):
    images, labels = [], []
    for d in (0, 1):
        for s in range(TRAIN_PHANTOMS_PER_DOMAIN):
            img, _ = gen_phantom(1000 + s, DOMAINS[d], desk_grid)
            images.append(img.values)
            labels.append(d)
    return np.stack(images), np.array(labels)


@pytest.fixture(scope="session")
def two_domain_model(training_stack):
    x0, ids = training_stack
    mc = ModelConfig.from_variant("tiny", IMAGE_SIZE, 2, patch_size=PATCH_SIZE)
    tc = TrainConfig(n_iters=TRAIN_ITERS, batch_size=8, learning_rate=1e-3, seed=0)
    model, history = train(x0, ids, mc, tc, GVP)
    return model, history


@pytest.fixture(scope="session")
def single_domain_model(training_stack):
    x0, ids = training_stack
    mask = ids == 0
    mc = ModelConfig.from_variant("tiny", IMAGE_SIZE, 2, patch_size=PATCH_SIZE)
    tc = TrainConfig(n_iters=TRAIN_ITERS, batch_size=8, learning_rate=1e-3, seed=0)
    model, _ = train(x0[mask], ids[mask], mc, tc, GVP)
    return model


def make_case(seed, domain, grid, projector, noise=NOISE):
    img, _ = gen_phantom(seed, DOMAINS[domain], grid)
    y = simulate_sinogram(img, projector, noise, seed=seed + 7)
    return img.values, y


def run_cdpir(y, projector, model, n_steps, label=None, seed=3, dc_cadence=1,
              dc_config=DC_CONFIG):
    cfg = CdpirConfig(n_steps=n_steps, label=label, dc_cadence=dc_cadence,
                      dc_config=dc_config, init_config=INIT_CONFIG,
                      schedule=GVP, seed=seed)
    return cdpir_reconstruct(y, projector, model, cfg)


def run_asdpocs(y, projector, budget):
    x, _, _ = asd_pocs_itv(y, projector, AsdPocsConfig(p_outer=budget, q_tv=1,
                                                       k_subsets=5))
    return x


def matched_budget(n_steps):
    return INIT_CONFIG.init_iters + n_steps * DC_CONFIG.p_outer


def test_criterion_1_adjointness():
    start = time.time()
    grid = ImageGrid(32, 32, 1.0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for kind in (GeometryKind.FAN_FLAT, GeometryKind.FAN_CURVED,
                 GeometryKind.PARALLEL):
        proj = Projector(default_geometry(grid, kind, n_det=64, n_views=30), grid)
        for _ in range(20):
            x = rng.normal(size=grid.shape)
            y = rng.normal(size=(30, 64))
            lhs = np.sum(proj.project(x) * y)
            rhs = np.sum(x * proj.backproject(y))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    elapsed = time.time() - start
    report(1, "projector/backprojector adjointness <= 1e-6 across 3 geometries",
           worst <= 1e-6 and elapsed < 10,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_gaussian_score_oracle():
    start = time.time()
    rng = np.random.default_rng(1)
    m, tau = 0.7, 1.3
    x = rng.normal(size=200)
    worst_good, worst_alt = 0.0, 0.0
    for sched in SCHEDULES:
        v_fn = gaussian_velocity_field(m, tau, sched)
        for t in np.arange(0.1, 0.95, 0.1):
            t = float(t)
            v = v_fn(x, t)
            ref = gaussian_score(x, t, m, tau, sched)
            scale = np.max(np.abs(ref))
            got = velocity_to_score(v, x, t, sched)
            worst_good = max(worst_good, np.max(np.abs(got - ref)) / scale)
            alt = velocity_to_score_alt(v, x, t, sched)
            worst_alt = max(worst_alt, np.max(np.abs(alt - ref)) / scale)
    elapsed = time.time() - start
    # the alternative grouping demonstrably fails the same oracle
    report(2, "velocity-to-score matches analytic Gaussian score <= 1e-8 "
              "(alt form fails as documented)",
           worst_good <= 1e-8 and worst_alt > 1e-2 and elapsed < 5,
           f"good {worst_good:.2e}, alt {worst_alt:.2e}, {elapsed:.1f}s")


def test_criterion_3_reverse_sde_sampling():
    start = time.time()
    m, tau = 0.8, 0.6
    v_fn = gaussian_velocity_field(m, tau, GVP)
    cfg = SamplerConfig(n_steps=500, seed=7)
    samples = reverse_sample(v_fn, GVP, cfg, (2000,))
    mean_err = abs(float(np.mean(samples)) - m)
    std_err = abs(float(np.std(samples)) - tau)
    elapsed = time.time() - start
    report(3, "reverse-SDE sampler recovers Gaussian mean/std within 0.05",
           mean_err < 0.05 and std_err < 0.05 and elapsed < 30,
           f"mean err {mean_err:.3f}, std err {std_err:.3f}, {elapsed:.1f}s")


def test_criterion_4_gradient_check():
    start = time.time()
    torch.manual_seed(0)
    mc = ModelConfig(image_size=8, n_labels=2, patch_size=2, depth=1,
                     hidden_size=16, n_heads=2)
    model = build_model(mc, seed=0).double()
    with torch.no_grad():
        model.head.weight.normal_(std=0.05)
        model.head.bias.normal_(std=0.05)
        model.final_modulation.weight.normal_(std=0.05)
        for block in model.blocks:
            block.modulation.weight.normal_(std=0.05)
    rng = np.random.default_rng(1)
    x0 = torch.as_tensor(rng.normal(size=(2, 8, 8)))
    eps = torch.as_tensor(rng.normal(size=(2, 8, 8)))
    t = np.array([0.3, 0.7])
    c = torch.tensor([0, 1])
    model.zero_grad()
    velocity_loss(model, x0, c, t, eps, GVP).backward()
    candidates = [(name, p, int(i)) for name, p in model.named_parameters()
                  for i in rng.choice(p.numel(), size=min(3, p.numel()),
                                      replace=False)]
    rng.shuffle(candidates)
    h = 1e-3
    worst, checked = 0.0, 0
    for name, p, i in candidates:
        if checked >= 60:
            break
        analytic = float(p.grad.reshape(-1)[i])
        with torch.no_grad():
            orig = float(p.reshape(-1)[i])
            p.reshape(-1)[i] = orig + h
            lp = float(velocity_loss(model, x0, c, t, eps, GVP))
            p.reshape(-1)[i] = orig - h
            lm = float(velocity_loss(model, x0, c, t, eps, GVP))
            p.reshape(-1)[i] = orig
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8))
        checked += 1
    elapsed = time.time() - start
    report(4, "autodiff matches finite differences on >= 50 parameters "
              "within 1e-4",
           checked >= 50 and worst <= 1e-4 and elapsed < 60,
           f"{checked} params, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_5_lambda_tv_oracle():
    start = time.time()
    rng = np.random.default_rng(7)

    class DenseProjector:
        def __init__(self, a):
            self.a = a

        def project(self, x):
            return (self.a @ x.ravel()).reshape(-1, 1)

    lams = np.arange(1, 10_001) / 10_000.0
    grid_ok = True
    for _ in range(50):
        a = rng.normal(size=(6, 4))
        proj = DenseProjector(a)
        x_sart = rng.normal(size=(1, 4))
        x_tv = x_sart + 0.5 * rng.normal(size=(1, 4))
        y = (a @ rng.normal(size=4)).reshape(6, 1)
        eps_prev = float(rng.uniform(0, 4))
        lam = solve_lambda_tv(x_sart, x_tv, y, proj, eps_prev, 0.8)
        eps_sart = float(np.sum((proj.project(x_sart) - y) ** 2))
        tau = 0.2 * eps_sart + 0.8 * eps_prev

        def resid(l):
            xm = (1 - l) * x_sart + l * x_tv
            return float(np.sum((proj.project(xm) - y) ** 2))

        best = min(abs(resid(l) - tau) for l in lams)
        if abs(resid(lam) - tau) > best + 1e-9 * max(tau, 1.0):
            grid_ok = False

    # instrumented full run: interior roots hit the residual target within 5%
    grid = ImageGrid(32, 32, 1.0)
    proj = Projector(default_geometry(grid, GeometryKind.FAN_FLAT,
                                      n_det=64, n_views=20), grid)
    truth, _ = gen_phantom(1, DOMAINS[0], grid)
    y = proj.project(truth.values)
    _, _, diags = asd_pocs_itv(y, proj, AsdPocsConfig(p_outer=15, q_tv=1,
                                                      k_subsets=4, nonneg=False))
    run_ok = all(
        abs(d["eps"] - d["tau"]) <= 0.05 * d["tau"]
        for d in diags if 1e-9 < d["lambda_tv"] < 1 - 1e-9
    )
    elapsed = time.time() - start
    report(5, "lambda_TV matches 1e4-point grid search; interior roots hit "
              "the residual target within 5%",
           grid_ok and run_ok and elapsed < 60,
           f"{elapsed:.1f}s")


def test_criterion_6_asd_pocs_superiority():
    start = time.time()
    grid = ImageGrid(128, 128, 0.5)
    geom = default_geometry(grid, GeometryKind.FAN_FLAT, n_det=256,
                            n_views=N_VIEWS_FULL)
    proj = Projector(subsample_views(geom, N_VIEWS_SPARSE), grid)
    yy, xx = np.meshgrid(np.arange(128) - 63.5, np.arange(128) - 63.5,
                         indexing="ij")
    truth = np.zeros(grid.shape)

    def ellipse(cy, cx, a, b, val):
        truth[((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0] = val

    ellipse(0, 0, 58, 48, 0.4)
    ellipse(-5, 0, 50, 40, 0.2)
    ellipse(-18, -14, 14, 9, 0.7)
    ellipse(-18, 14, 14, 9, 0.1)
    ellipse(16, 0, 10, 16, 0.55)
    ellipse(30, -20, 5, 5, 0.9)
    y = proj.project(truth)
    cfg = AsdPocsConfig(p_outer=30, q_tv=5, k_subsets=5)
    x_itv, _, _ = asd_pocs_itv(y, proj, cfg)
    system = SartSystem(proj, 5)
    x_sart = np.zeros(grid.shape)
    for _ in range(30):
        x_sart = np.maximum(os_sart_pass(x_sart, y, system), 0.0)
    rng_range = float(truth.max() - truth.min())
    p_itv = psnr(x_itv, truth, rng_range)
    p_sart = psnr(x_sart, truth, rng_range)
    elapsed = time.time() - start
    report(6, "ASD-POCS-iTV beats matched-budget OS-SART by >= 1 dB at 55 "
              "of 246 views (128x128, noiseless)",
           p_itv >= p_sart + 1.0 and elapsed < 120,
           f"iTV {p_itv:.2f} dB vs OS-SART {p_sart:.2f} dB, {elapsed:.1f}s")


@pytest.mark.heavy
def test_criterion_7_end_to_end_smoke(desk_grid, sparse_projector,
                                      two_domain_model):
    model, history = two_domain_model
    losses = np.array([l for _, l in history])
    smoothed_drop = losses[-100:].mean() < 0.5 * losses[:100].mean()
    truth, y = make_case(9001, 0, desk_grid, sparse_projector)
    rng_range = float(truth.max() - truth.min())
    rep = run_cdpir(y, sparse_projector, model, n_steps=200, label=0)
    p_cdpir = psnr(rep.image, truth, rng_range)
    x_pocs = run_asdpocs(y, sparse_projector, matched_budget(200))
    p_pocs = psnr(x_pocs, truth, rng_range)
    report(7, "trained Tiny CDPIR (200 steps) beats matched-budget ASD-POCS "
              "by >= 0.5 dB in-distribution",
           smoothed_drop and p_cdpir >= p_pocs + 0.5,
           f"CDPIR {p_cdpir:.2f} dB vs ASD-POCS {p_pocs:.2f} dB, "
           f"loss {losses[:100].mean():.3f}->{losses[-100:].mean():.3f}")


@pytest.mark.heavy
def test_criterion_8_ood_ablation(desk_grid, sparse_projector,
                                  two_domain_model, single_domain_model):
    model2, _ = two_domain_model
    model1 = single_domain_model
    n_cases = 10
    n_steps = 100
    # matched sweep budget: one DC call every OOD_DC_CADENCE steps
    budget = INIT_CONFIG.init_iters + \
        -(-n_steps // OOD_DC_CADENCE) * OOD_DC_CONFIG.p_outer
    p_two, p_one, p_pocs = [], [], []
    for i in range(n_cases):
        truth, y = make_case(9100 + i, 2, desk_grid, sparse_projector)
        rng_range = float(truth.max() - truth.min())
        rep2 = run_cdpir(y, sparse_projector, model2, n_steps=n_steps,
                         dc_cadence=OOD_DC_CADENCE, dc_config=OOD_DC_CONFIG)
        rep1 = run_cdpir(y, sparse_projector, model1, n_steps=n_steps,
                         dc_cadence=OOD_DC_CADENCE, dc_config=OOD_DC_CONFIG)
        xb = run_asdpocs(y, sparse_projector, budget)
        p_two.append(psnr(rep2.image, truth, rng_range))
        p_one.append(psnr(rep1.image, truth, rng_range))
        p_pocs.append(psnr(xb, truth, rng_range))
    m_two, m_one, m_pocs = map(np.mean, (p_two, p_one, p_pocs))
    report(8, "OOD: two-domain checkpoint >= single-domain checkpoint and "
              "CDPIR >= ASD-POCS (mean over 10 phantoms)",
           m_two >= m_one and m_two >= m_pocs,
           f"two {m_two:.2f} dB, one {m_one:.2f} dB, ASD-POCS {m_pocs:.2f} dB")


@pytest.mark.heavy
def test_criterion_9_step_count_robustness(desk_grid, sparse_projector,
                                           two_domain_model):
    model, _ = two_domain_model
    truth, y = make_case(9001, 0, desk_grid, sparse_projector)
    rng_range = float(truth.max() - truth.min())
    p200 = psnr(run_cdpir(y, sparse_projector, model, n_steps=200,
                          label=0).image, truth, rng_range)
    # matched data-consistency budget: 1000 steps with DC every 5th step
    # applies the same 200 consistency passes as the 200-step run
    p1000 = psnr(run_cdpir(y, sparse_projector, model, n_steps=1000,
                           label=0, dc_cadence=5).image, truth, rng_range)
    report(9, "PSNR at 200 steps within 1 dB of 1000 steps",
           abs(p200 - p1000) <= 1.0,
           f"200 steps {p200:.2f} dB, 1000 steps {p1000:.2f} dB")


def test_criterion_10_determinism(tmp_path):
    from cdpir.cli import main

    data = tmp_path / "a"
    data2 = tmp_path / "b"
    args = ["phantom", "--nx", "16", "--n-train", "2", "--n-test", "1",
            "--views", "16", "--seed", "4"]
    assert main(args + ["--out", str(data)]) == 0
    assert main(args + ["--out", str(data2)]) == 0
    same_data = all(
        (data / f.name).read_bytes() == f.read_bytes()
        for f in data2.iterdir() if f.suffix == ".ten"
    ) and (data / "manifest.json").read_text() == (data2 / "manifest.json").read_text()

    ck1, ck2 = tmp_path / "c1", tmp_path / "c2"
    targs = ["train", "--data", str(data / "manifest.json"), "--iters", "2",
             "--batch-size", "2", "--seed", "9"]
    assert main(targs + ["--out", str(ck1)]) == 0
    assert main(targs + ["--out", str(ck2)]) == 0
    same_ckpt = (ck1 / "ckpt_final.bin").read_bytes() == \
        (ck2 / "ckpt_final.bin").read_bytes()

    sino = next(data.glob("test_*_sino.ten"))
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    rargs = ["reconstruct", "--manifest", str(data / "manifest.json"),
             "--sino", str(sino), "--method", "cdpir",
             "--ckpt", str(ck1 / "ckpt_final.bin"), "--steps", "2",
             "--seed", "6", "--config", str(tmp_path / "rc.json")]
    (tmp_path / "rc.json").write_text(
        '{"dc_p_outer": 2, "dc_k_subsets": 2, "init_iters": 2}')
    assert main(rargs + ["--out", str(r1)]) == 0
    assert main(rargs + ["--out", str(r2)]) == 0
    same_recon = (r1 / "image.ten").read_bytes() == (r2 / "image.ten").read_bytes()

    report(10, "dataset build, training, and reconstruction are bit-identical "
               "across same-seed reruns",
           same_data and same_ckpt and same_recon,
           f"data {same_data}, ckpt {same_ckpt}, recon {same_recon}")
