"""Acceptance gate: one test (one pass/fail line under `pytest -v`) per
criterion, each stating its tolerance. Every expected value is produced by an
independent oracle inside this file — scalar loops, finite differences,
hand-built geometry, or hand-tallied arithmetic — never by the code under
test.

Criteria and tolerances:
  1 matching equals brute force        exact id order, < 30 s for 100 cases
  2 loss scalar oracles                1e-6 absolute; cycle == 0.0 exactly
  3 loss report composition            1e-6 absolute on every emitted report
  4 analytic vs numeric gradients      rel err <= 1e-4, 100 params, < 2 min
  5 toy training convergence           cycle loss @500 <= 50% of @1, < 10 min
  6 refiner structure guarantees       bit-exact at strength 0; beats noise
  7 depth export and relief meshes     <= 1/65535 per pixel; watertight
  8 pipeline resume                    stage counters confine recomputation
  9 study aggregate arithmetic         qs_avg == 93.6, qq_avg == 4.22 exactly
"""

from __future__ import annotations

import dataclasses
import math
import time
from collections import Counter
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from p2d.depth import (
    DepthMap,
    depth_to_relief_mesh,
    export_depth_png16,
    import_depth_png16,
    normalize_depth,
)
from p2d.gan.losses import (
    adversarial_loss,
    compute_losses,
    cycle_consistency_loss,
)
from p2d.gan.nets import TranslatorPair
from p2d.gan.train import TrainConfig, build_translator_pair, train
from p2d.matching import SemanticProfile, match_top_k
from p2d.pipeline import run_full
from p2d.refine import (
    RefineRequest,
    StubRefineBackend,
    load_image_unit,
    refine,
    structure_score,
    to_gray,
)
from p2d.study.core import (
    StudyStore,
    aggregate_study,
    create_study,
    record_response,
)

from conftest import (
    build_two_domain_corpus,
    make_pipeline_config,
    restyled,
    shape_image,
    write_png,
)

# --------------------------------------------------------------------------
# criterion 1: matching equals exhaustive brute force
# --------------------------------------------------------------------------


def brute_force_top_k(painting: SemanticProfile,
                      photos: list[SemanticProfile], k: int) -> list[str]:
    """Independent reference: per-photo cosine with explicit norms, then a
    full sort with the documented tie-break (descending score, ascending id)."""
    a = painting.weights
    na = math.sqrt(float(np.dot(a, a)))
    scored = []
    for photo in photos:
        b = photo.weights
        nb = math.sqrt(float(np.dot(b, b)))
        scored.append((float(np.dot(a, b)) / (na * nb), photo.image_id))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [image_id for _, image_id in scored[:k]]


def test_criterion_1_matching_equals_brute_force_within_30s():
    """100 random instances, up to 1000 photo profiles, dictionary sizes
    4..64, K in {1, 3, 5, 10}; id sequences must match the brute-force oracle
    exactly, including duplicate-profile ties, in under 30 seconds total."""
    started = time.monotonic()
    k_choices = (1, 3, 5, 10)
    for case in range(100):
        rng = np.random.default_rng(10_000 + case)
        dict_size = int(rng.integers(4, 65))
        n_photos = int(rng.integers(10, 1001))
        k = int(k_choices[rng.integers(len(k_choices))])

        def profile(image_id: str) -> SemanticProfile:
            w = rng.uniform(0.0, 1.0, size=dict_size) + 1e-9
            return SemanticProfile(image_id=image_id, weights=w / w.sum())

        photos = [profile(f"ph{i:04d}") for i in range(n_photos)]
        if case % 3 == 0:
            # exact ties: clones of one profile under fresh ids, ordered by id
            clone = photos[int(rng.integers(n_photos))]
            for j in range(3):
                photos.append(SemanticProfile(image_id=f"tie{j}",
                                              weights=clone.weights.copy()))
        painting = profile("painting")

        expected = brute_force_top_k(painting, photos, k)
        got = [photo_id for photo_id, _ in
               match_top_k(painting, photos, k).matches]
        assert got == expected, f"case {case}: {got} != {expected}"
    elapsed = time.monotonic() - started
    assert elapsed < 30.0, f"matching acceptance took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 2: loss values against scalar-loop oracles
# --------------------------------------------------------------------------

MICRO = TrainConfig(iterations=1, batch_size=2, image_size=8, base_channels=2,
                    n_res_blocks=0, downsample=False, activation="tanh",
                    use_norm=False, seed=7)


def micro_pair(identity_init: bool = False) -> TranslatorPair:
    return build_translator_pair(MICRO, identity_init=identity_init).to_double()


def micro_batches() -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(31)
    ori = torch.from_numpy(rng.uniform(0.2, 0.8, size=(2, 3, 8, 8)))
    photo = torch.from_numpy(rng.uniform(0.2, 0.8, size=(2, 3, 8, 8)))
    return ori, photo


def oracle_adversarial(disc, real: torch.Tensor, fake: torch.Tensor) -> float:
    """E[log sigmoid(D(real))] + E[log sigmoid(-D(fake))], element by element."""
    def mean_log_sigmoid(logits: np.ndarray) -> float:
        total, count = 0.0, 0
        for x in logits.reshape(-1):
            total += -math.log1p(math.exp(-float(x)))
            count += 1
        return total / count

    with torch.no_grad():
        real_logits = disc(real).numpy()
        fake_logits = disc(fake).numpy()
    return mean_log_sigmoid(real_logits) + mean_log_sigmoid(-fake_logits)


def oracle_cycle(pair: TranslatorPair, ori: torch.Tensor,
                 photo: torch.Tensor) -> float:
    with torch.no_grad():
        rec_ori = pair.gen_photo_to_ori(pair.gen_ori_to_photo(ori)).numpy()
        rec_photo = pair.gen_ori_to_photo(pair.gen_photo_to_ori(photo)).numpy()

    def l1(a: np.ndarray, b: np.ndarray) -> float:
        total, count = 0.0, 0
        for x, y in zip(a.reshape(-1), b.reshape(-1)):
            total += abs(float(x) - float(y))
            count += 1
        return total / count

    return l1(rec_ori, ori.numpy()) + l1(rec_photo, photo.numpy())


class ConstantHalfDisc(torch.nn.Module):
    """Discriminator stub whose sigmoid output is exactly 0.5 everywhere."""

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        b = batch.shape[0]
        return torch.zeros((b, 1, 4, 4), dtype=batch.dtype)


def test_criterion_2_losses_match_scalar_oracles_to_1e6():
    """Tiny batches (2 images, 8x8): library losses within 1e-6 absolute of
    scalar-loop references; a constant-0.5 discriminator yields 2*log(0.5)
    = -1.3863 for each adversarial term; identity generators give a cycle
    loss of exactly 0.0."""
    pair = micro_pair()
    ori, photo = micro_batches()
    with torch.no_grad():
        fake_ori = pair.gen_photo_to_ori(photo)
        fake_photo = pair.gen_ori_to_photo(ori)

        got_adv_ori = float(adversarial_loss(pair.disc_ori, ori, fake_ori))
        got_adv_photo = float(adversarial_loss(pair.disc_photo, photo,
                                               fake_photo))
        got_cyc = float(cycle_consistency_loss(pair, ori, photo))

    assert got_adv_ori == pytest.approx(
        oracle_adversarial(pair.disc_ori, ori, fake_ori), abs=1e-6)
    assert got_adv_photo == pytest.approx(
        oracle_adversarial(pair.disc_photo, photo, fake_photo), abs=1e-6)
    assert got_cyc == pytest.approx(oracle_cycle(pair, ori, photo), abs=1e-6)

    # indifferent discriminator: each adversarial term is 2*log(0.5)
    blind = dataclasses.replace(pair, disc_ori=ConstantHalfDisc(),
                                disc_photo=ConstantHalfDisc())
    with torch.no_grad():
        terms = compute_losses(blind, ori, photo, MICRO)
    expected = 2.0 * math.log(0.5)
    assert float(terms.adv_ori) == pytest.approx(expected, abs=1e-6)
    assert float(terms.adv_photo) == pytest.approx(expected, abs=1e-6)
    assert round(expected, 4) == -1.3863

    # identity generators reconstruct inputs exactly: cycle loss is zero
    identity = micro_pair(identity_init=True)
    with torch.no_grad():
        cyc = float(cycle_consistency_loss(identity, ori, photo))
    assert cyc == 0.0


# --------------------------------------------------------------------------
# criterion 3: every emitted report composes exactly
# --------------------------------------------------------------------------


def test_criterion_3_loss_reports_compose_to_1e6(tmp_path):
    """Every LossReport from a real training run satisfies
    total = adv_ori + lambda_adv * adv_photo + lambda_cyc * cyc within 1e-6,
    under default and non-default weights."""
    manifest = build_two_domain_corpus(tmp_path / "corpus", n_per_domain=4,
                                       size=16)
    for lambda_adv, lambda_cyc in ((1.0, 10.0), (0.25, 3.5)):
        config = TrainConfig(iterations=30, batch_size=2, image_size=16,
                             base_channels=4, n_res_blocks=1, seed=3,
                             checkpoint_every=30, lambda_adv=lambda_adv,
                             lambda_cyc=lambda_cyc)
        pair = build_translator_pair(config)
        result = train(pair, manifest, config,
                       tmp_path / f"run_{lambda_adv}_{lambda_cyc}")
        assert len(result.reports) == 30
        for report in result.reports:
            assert report.total == pytest.approx(
                report.adv_ori + lambda_adv * report.adv_photo
                + lambda_cyc * report.cyc,
                abs=1e-6,
            ), f"report at step {report.step} does not compose"


# --------------------------------------------------------------------------
# criterion 4: analytic gradients vs central finite differences
# --------------------------------------------------------------------------


def test_criterion_4_gradcheck_rel_err_1e4_within_2min():
    """Micro model (<= 1000 parameters, float64): analytic gradient of the
    total loss vs central differences (h = 1e-6) on 100 sampled parameters,
    relative error <= 1e-4, in under 2 minutes."""
    started = time.monotonic()
    pair = micro_pair()
    assert pair.parameter_count() <= 1000

    rng = np.random.default_rng(11)
    ori = torch.from_numpy(rng.uniform(0.2, 0.8, size=(2, 3, 8, 8)))
    photo = torch.from_numpy(rng.uniform(0.2, 0.8, size=(2, 3, 8, 8)))

    def objective() -> torch.Tensor:
        return compute_losses(pair, ori, photo, MICRO).total

    networks = (pair.gen_ori_to_photo, pair.gen_photo_to_ori,
                pair.disc_ori, pair.disc_photo)
    for net in networks:
        net.zero_grad()
    objective().backward()
    params = [p for net in networks for p in net.parameters()]
    flat_grad = torch.cat([p.grad.reshape(-1) for p in params])
    offsets = np.cumsum([0] + [p.numel() for p in params])

    h = 1e-6
    sampled = np.random.default_rng(23).choice(flat_grad.numel(), size=100,
                                               replace=False)
    worst = 0.0
    for flat_index in sampled:
        owner = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = int(flat_index - offsets[owner])
        param = params[owner]
        with torch.no_grad():
            origin = param.reshape(-1)[local].item()
            param.reshape(-1)[local] = origin + h
            f_plus = float(objective())
            param.reshape(-1)[local] = origin - h
            f_minus = float(objective())
            param.reshape(-1)[local] = origin
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(flat_grad[flat_index])
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic), abs(numeric))
        worst = max(worst, rel)
    elapsed = time.monotonic() - started
    assert worst <= 1e-4, f"worst relative error {worst:.3e}"
    assert elapsed < 120.0, f"gradient check took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 5: toy training convergence
# --------------------------------------------------------------------------


def test_criterion_5_toy_training_halves_cycle_loss_within_10min(tmp_path):
    """64 procedural 32x32 shapes per domain (photos are color-inverted
    shapes): 500 CPU steps reduce the cycle loss to <= 50% of its step-1
    value in under 10 minutes."""
    started = time.monotonic()
    manifest = build_two_domain_corpus(tmp_path / "corpus", n_per_domain=64,
                                       size=32)
    config = TrainConfig(iterations=500, batch_size=4, learning_rate=1e-3,
                         image_size=32, base_channels=16, n_res_blocks=2,
                         seed=0, checkpoint_every=500)
    pair = build_translator_pair(config)
    assert all(p.device.type == "cpu" for p in pair.gen_ori_to_photo.parameters())
    result = train(pair, manifest, config, tmp_path / "run")

    first, last = result.reports[0], result.reports[-1]
    assert first.step == 1 and last.step == 500
    ratio = last.cyc / first.cyc
    elapsed = time.monotonic() - started
    assert ratio <= 0.5, (
        f"cycle loss fell only to {ratio:.1%} of its step-1 value "
        f"({first.cyc:.5f} -> {last.cyc:.5f})"
    )
    assert elapsed < 600.0, f"toy training took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 6: refiner structure guarantees
# --------------------------------------------------------------------------


def test_criterion_6_refiner_structure_guarantees(tmp_path):
    """Stub refiner at strength 0 returns the reference bit-exactly;
    structure_score(a, a) == 1.0 exactly; on 20 toy cases the refined image
    scores strictly higher against the content than a uniform-noise baseline."""
    backend = StubRefineBackend()

    base = shape_image(2500)
    content = write_png(tmp_path / "c0.png", base)
    reference = write_png(tmp_path / "r0.png", restyled(base))
    frozen = refine(RefineRequest(content_image=str(content),
                                  reference_image=str(reference),
                                  out_path=str(tmp_path / "frozen.png"),
                                  steps=10, strength=0.0, seed=1), backend)
    out_pixels = np.asarray(load_image_unit(frozen.real_scene.path))
    ref_pixels = np.asarray(load_image_unit(reference))
    assert np.array_equal(out_pixels, ref_pixels), \
        "strength 0 must reproduce the reference bit-exactly"

    gray = to_gray(load_image_unit(content))
    assert structure_score(gray, gray) == 1.0

    for case in range(20):
        base = shape_image(2000 + case, 32)
        cpath = write_png(tmp_path / f"c{case}.png", base)
        rpath = write_png(tmp_path / f"r{case}.png", restyled(base))
        result = refine(RefineRequest(content_image=str(cpath),
                                      reference_image=str(rpath),
                                      out_path=str(tmp_path / f"o{case}.png"),
                                      steps=10, strength=0.6, seed=100 + case),
                        backend)
        content_arr = load_image_unit(cpath)
        noise = np.random.default_rng(900 + case).uniform(
            0.0, 1.0, size=content_arr.shape)
        noise_score = structure_score(to_gray(noise), to_gray(content_arr))
        assert result.structure_score > noise_score, (
            f"case {case}: refined {result.structure_score:.4f} did not beat "
            f"noise {noise_score:.4f}"
        )


# --------------------------------------------------------------------------
# criterion 7: depth export and relief meshes
# --------------------------------------------------------------------------


def assert_watertight(mesh) -> None:
    directed: Counter = Counter()
    undirected: Counter = Counter()
    for a, b, c in mesh.triangles:
        assert len({a, b, c}) == 3
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(u, v)] += 1
            undirected[frozenset((u, v))] += 1
    assert all(n == 1 for n in directed.values()), "inconsistent orientation"
    assert all(n == 2 for n in undirected.values()), "open or non-manifold edge"
    euler = len(mesh.vertices) - len(undirected) + len(mesh.triangles)
    assert euler == 2, f"Euler characteristic {euler}"


def signed_volume(mesh) -> float:
    total = 0.0
    vertices = [np.asarray(v, dtype=np.float64) for v in mesh.vertices]
    for a, b, c in mesh.triangles:
        total += float(np.dot(vertices[a],
                              np.cross(vertices[b], vertices[c]))) / 6.0
    return total


def test_criterion_7_depth_export_and_relief_meshes(tmp_path):
    """PNG16 round trip within 1/65535 per pixel on 20 random maps;
    normalize_depth idempotent (bitwise) and order-preserving; relief meshes
    watertight; the 2x2 constant-map mesh equals a hand-constructed box."""
    for case in range(20):
        rng = np.random.default_rng(40 + case)
        h, w = (int(rng.integers(2, 40)) for _ in range(2))
        raw = DepthMap(values=rng.uniform(-3.0, 7.0, size=(h, w)),
                       source_image_id=f"map{case}")
        depth = normalize_depth(raw)

        png_path = tmp_path / f"d{case}.png"
        export_depth_png16(depth, png_path)
        restored = import_depth_png16(png_path)
        max_err = float(np.abs(restored.values - depth.values).max())
        assert max_err <= 1.0 / 65535.0, f"case {case}: {max_err}"

        again = normalize_depth(depth)
        assert np.array_equal(again.values, depth.values), \
            "normalize_depth must be idempotent"
        flat = depth.values.reshape(-1)
        raw_flat = raw.values.reshape(-1)
        order = np.argsort(raw_flat, kind="stable")
        diffs_raw = np.diff(raw_flat[order])
        diffs_norm = np.diff(flat[order])
        assert np.all(diffs_norm[diffs_raw > 0] > 0), "order not preserved"
        assert np.all(diffs_norm[diffs_raw == 0] == 0), "ties not preserved"

        if case < 5:
            mesh = depth_to_relief_mesh(depth, pitch_mm=0.5,
                                        relief_height_mm=4.0,
                                        base_thickness_mm=1.0)
            assert_watertight(mesh)

    # 2x2 constant map -> exactly the hand-constructed box
    box = depth_to_relief_mesh(
        DepthMap(values=np.ones((2, 2)), source_image_id="flat",
                 normalized=True),
        pitch_mm=1.0, relief_height_mm=10.0, base_thickness_mm=2.0,
    )
    expected_corners = {(float(x), float(y), float(z))
                        for x in (0.0, 1.0) for y in (0.0, 1.0)
                        for z in (0.0, 12.0)}
    got_corners = {tuple(float(c) for c in v) for v in box.vertices}
    assert got_corners == expected_corners
    assert len(box.vertices) == 8
    assert len(box.triangles) == 12
    assert_watertight(box)
    assert signed_volume(box) == 12.0


# --------------------------------------------------------------------------
# criterion 8: pipeline resume
# --------------------------------------------------------------------------


def test_criterion_8_resume_recomputes_only_downstream_of_deleted(tmp_path):
    """Delete one painting's pseudo-real artifact and rerun: stage counters
    show recomputation confined to that item's producing stage; upstream
    stages and the other items are skipped, and downstream stages reuse
    their outputs because the regenerated bytes are identical."""
    config = make_pipeline_config(tmp_path)
    first = run_full(config)
    assert len(first.items) == 3 and not first.failures

    victim = sorted(first.items)[0]
    Path(first.items[victim]["pseudo_real"]["path"]).unlink()

    second = run_full(config)
    counters = {name: (c.computed, c.skipped, c.failed)
                for name, c in second.stages.items()}
    assert counters == {
        "match": (0, 1, 0),
        "train": (0, 1, 0),
        "translate": (1, 2, 0),
        "refine": (0, 3, 0),
        "depth": (0, 3, 0),
        "mesh": (0, 3, 0),
    }, f"resume touched more than the deleted artifact: {counters}"
    assert Path(second.items[victim]["pseudo_real"]["path"]).is_file()


# --------------------------------------------------------------------------
# criterion 9: study aggregate arithmetic
# --------------------------------------------------------------------------


def test_criterion_9_study_aggregate_arithmetic_exact(tmp_path):
    """100 synthetic sessions engineered to per-question identification
    rates (90, 100, 93, 95, 90)% and rating means (4.3, 4.3, 4.1, 4.2, 4.2)
    must aggregate to qs_avg == 93.6 and qq_avg == 4.22 exactly (flat
    float equality, no tolerance)."""
    run = SimpleNamespace(run_id="acceptance001", items={
        f"pt{i:02d}": {
            "painting_id": f"pt{i:02d}",
            "painting_path": f"/nowhere/pt{i:02d}.png",
            "real_scene": {"id": f"rs{i:02d}", "path": f"/nowhere/rs{i:02d}.png"},
        }
        for i in range(9)
    })
    definition = create_study(run, n_question_sets=5, seed=1)
    store = StudyStore(tmp_path / "studies")
    store.save_study(definition)

    correct_counts = [90, 100, 93, 95, 90]
    fives = [30, 30, 10, 20, 20]  # rest rate 4: means 4.3/4.3/4.1/4.2/4.2
    for participant in range(100):
        session_id = store.open_session(definition.study_id)["session_id"]
        for qset in definition.question_sets:
            if participant < correct_counts[qset.index - 1]:
                choice = qset.qs.correct_id
            else:
                choice = next(c for c in qset.qs.candidates
                              if c != qset.qs.correct_id)
            record_response(store, definition.study_id, session_id,
                            qset.index, "qs", qs_choice=choice)
            rating = 5 if participant < fives[qset.index - 1] else 4
            record_response(store, definition.study_id, session_id,
                            qset.index, "qq", qq_rating=rating)

    result = aggregate_study(store, definition.study_id)
    assert result.n_participants == 100
    assert [row["qs_percent"] for row in result.per_question] == \
        [90.0, 100.0, 93.0, 95.0, 90.0]
    assert [row["qq_mean"] for row in result.per_question] == \
        [4.3, 4.3, 4.1, 4.2, 4.2]
    assert result.qs_avg == 93.6
    assert result.qq_avg == 4.22
