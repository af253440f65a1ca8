"""Image metrics, probe protocol, and the report format."""

import math

import numpy as np
import pytest
import torch
from sklearn.metrics import f1_score

from stylesep.core import ContractError, EmptyInputError, Image, Split
from stylesep.datagen import DataSpec, generate_dataset, ventricle_pixels
from stylesep.metrics import (
    CSV_HEADER,
    MetricsReport,
    ProbeConfig,
    RecordAudit,
    build_report,
    evaluate_disease,
    evaluate_domain,
    macro_f1,
    reconstruction_metrics,
    rmse,
    ssim,
    train_probe,
    write_reports_csv,
)
from stylesep.nets import NetworkConfig, build_bundle


@pytest.fixture(scope="module")
def oracle_dataset():
    return generate_dataset(
        DataSpec(
            train_subjects_per_cell=8,
            test_subjects_per_cell=5,
            images_per_subject=1,
            seed=11,
        )
    )


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(
        DataSpec(
            image_shape=(1, 32, 32),
            train_subjects_per_cell=4,
            test_subjects_per_cell=2,
            images_per_subject=1,
            seed=7,
        )
    )


def ventricle_features(dataset):
    def featurize(records):
        return np.array(
            [[float(ventricle_pixels(dataset.load_image(r)))] for r in records]
        )

    return featurize


def mean_intensity_features(dataset):
    def featurize(records):
        return np.array([[float(dataset.load_image(r).values.mean())] for r in records])

    return featurize


class TestRmse:
    def test_identical(self):
        x = np.random.default_rng(0).random((1, 8, 8))
        assert rmse(x, x.copy()) == 0.0

    def test_constant_offset(self):
        x = np.zeros((1, 4, 4))
        assert abs(rmse(x, np.full((1, 4, 4), 0.5)) - 0.5) <= 1e-12

    def test_thousand_random_instances_match_norm_oracle(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            a = rng.normal(size=n)
            b = rng.normal(size=n)
            got = rmse(a.reshape(1, 1, -1), b.reshape(1, 1, -1))
            expected = float(np.linalg.norm(a - b) / math.sqrt(n))
            worst = max(worst, abs(got - expected))
        assert worst <= 1e-7

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            rmse(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))
        with pytest.raises(EmptyInputError):
            rmse(np.zeros((0,)), np.zeros((0,)))

    def test_accepts_images(self):
        img = Image(np.full((1, 8, 8), 0.25, dtype=np.float32))
        assert rmse(img, img) == 0.0


class TestSsim:
    def test_self_similarity_is_exactly_one(self):
        x = np.random.default_rng(2).random((1, 32, 32))
        assert ssim(x, x, data_range=1.0) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = rng.random((1, 24, 24))
        b = rng.random((1, 24, 24))
        assert abs(ssim(a, b, data_range=1.0) - ssim(b, a, data_range=1.0)) <= 1e-9

    def test_constant_images_match_luminance_closed_form(self):
        # For two constant images all variances and covariances vanish, so
        # only the luminance term survives: (2ab + C1) / (a^2 + b^2 + C1).
        a, b = 0.4, 0.5
        got = ssim(np.full((1, 16, 16), a), np.full((1, 16, 16), b), data_range=1.0)
        c1 = (0.01 * 1.0) ** 2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        assert abs(got - expected) <= 1e-6

    def test_bounded_on_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.random((1, 16, 16))
            b = rng.random((1, 16, 16))
            assert -1.0 <= ssim(a, b, data_range=1.0) <= 1.0

    def test_window_and_shape_errors(self):
        with pytest.raises(ContractError, match="smaller than window"):
            ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), data_range=1.0)
        with pytest.raises(ContractError, match="odd"):
            ssim(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)), window=4, data_range=1.0)
        with pytest.raises(ContractError):
            ssim(np.zeros((1, 16, 16)), np.zeros((1, 16, 17)), data_range=1.0)
        with pytest.raises(ContractError, match="data_range"):
            ssim(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)), data_range=0.0)

    def test_3d_volumes_supported(self):
        rng = np.random.default_rng(5)
        vol = rng.random((1, 12, 12, 12))
        assert ssim(vol, vol, data_range=1.0) == 1.0


class TestMacroF1:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 0, 1, 1])
        assert macro_f1(labels, labels, num_classes=2) == 1.0

    def test_hand_computed_half(self):
        # Confusion matrix by hand: both classes have precision = recall = 0.5.
        preds = np.array([0, 0, 1, 1])
        labels = np.array([0, 1, 0, 1])
        assert abs(macro_f1(preds, labels, num_classes=2) - 0.5) <= 1e-12

    def test_missing_class_scores_zero(self):
        preds = np.array([0, 0, 0])
        labels = np.array([0, 0, 0])
        assert abs(macro_f1(preds, labels, num_classes=2) - 0.5) <= 1e-12

    def test_thousand_random_instances_match_sklearn(self):
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(1000):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(2, 60))
            preds = rng.integers(0, k, size=n)
            labels = rng.integers(0, k, size=n)
            got = macro_f1(preds, labels, num_classes=k)
            expected = f1_score(
                labels, preds, labels=list(range(k)), average="macro", zero_division=0
            )
            worst = max(worst, abs(got - float(expected)))
        assert worst <= 1e-9

    def test_contract_errors(self):
        with pytest.raises(EmptyInputError):
            macro_f1(np.array([]), np.array([]), num_classes=2)
        with pytest.raises(ContractError):
            macro_f1(np.array([0, 1]), np.array([0]), num_classes=2)
        with pytest.raises(ContractError):
            macro_f1(np.array([0, 2]), np.array([0, 1]), num_classes=2)
        with pytest.raises(ContractError):
            macro_f1(np.array([0, 1]), np.array([0, 1]), num_classes=1)


class TestTrainProbe:
    def test_separable_blobs_reach_high_f1(self):
        rng = np.random.default_rng(7)
        x = np.vstack([rng.normal(-3, 0.3, (50, 4)), rng.normal(3, 0.3, (50, 4))])
        y = np.repeat([0, 1], 50)
        probe = train_probe(x, y, ProbeConfig(hidden=16, seed=0))
        assert macro_f1(probe.predict(x), y, num_classes=2) >= 0.99

    def test_default_hidden_width(self):
        assert ProbeConfig().hidden == 128
        assert ProbeConfig().epochs == 200
        assert ProbeConfig().lr == 1e-3

    def test_same_seed_gives_identical_parameters(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(40, 6))
        y = rng.integers(0, 2, size=40)
        p1 = train_probe(x, y, ProbeConfig(hidden=8, epochs=20, seed=3))
        p2 = train_probe(x, y, ProbeConfig(hidden=8, epochs=20, seed=3))
        for t1, t2 in zip(p1.model.state_dict().values(), p2.model.state_dict().values()):
            assert torch.equal(t1, t2)

    def test_single_class_labels_rejected(self):
        x = np.zeros((10, 3))
        with pytest.raises(ContractError, match=">= 2 classes"):
            train_probe(x, np.zeros(10, dtype=int), ProbeConfig())

    def test_standardization_makes_scale_irrelevant(self):
        rng = np.random.default_rng(9)
        x = np.vstack([rng.normal(-1, 0.2, (30, 3)), rng.normal(1, 0.2, (30, 3))])
        y = np.repeat([0, 1], 30)
        cfg = ProbeConfig(hidden=8, epochs=50, seed=0)
        p_raw = train_probe(x, y, cfg)
        p_scaled = train_probe(x * 1e6, y, cfg)
        assert np.array_equal(p_raw.predict(x), p_scaled.predict(x * 1e6))


class TestProbeProtocol:
    def test_disease_oracle_features_score_high(self, oracle_dataset):
        f1 = evaluate_disease(ventricle_features(oracle_dataset), oracle_dataset, seed=0)
        assert f1 >= 0.95

    def test_domain_oracle_features_score_high(self, oracle_dataset):
        f1 = evaluate_domain(mean_intensity_features(oracle_dataset), oracle_dataset, seed=0)
        assert f1 >= 0.9

    def test_uninformative_features_score_near_chance(self, oracle_dataset):
        # Average over several independent feature draws; each single draw is
        # lumpy at this sample size but the mean sits at chance level.
        scores = []
        for k in range(8):
            def noise_features(records, k=k):
                rng = np.random.default_rng((k, len(records)))
                return rng.normal(size=(len(records), 8))

            scores.append(
                evaluate_domain(noise_features, oracle_dataset, seed=0,
                                probe=ProbeConfig(hidden=32, seed=k))
            )
        assert abs(float(np.mean(scores)) - 0.5) <= 0.15

    def test_domain_probe_sees_only_cn_one_per_subject(self, oracle_dataset):
        audit = RecordAudit()
        evaluate_domain(
            mean_intensity_features(oracle_dataset), oracle_dataset, seed=0, audit=audit
        )
        touched = audit.records()
        assert touched
        assert all(r.diagnosis.value == "CN" for r in touched)
        for role in ("probe-train", "probe-eval"):
            ids = [r.subject_id for r in audit.records(role)]
            assert len(ids) == len(set(ids))
        assert not set(r.subject_id for r in audit.records("probe-train")) & set(
            r.subject_id for r in audit.records("probe-eval")
        )

    def test_disease_probe_sees_only_ad_and_cn(self, oracle_dataset):
        audit = RecordAudit()
        evaluate_disease(
            ventricle_features(oracle_dataset), oracle_dataset, seed=0, audit=audit
        )
        diagnoses = {r.diagnosis.value for r in audit.records()}
        assert diagnoses == {"CN", "AD"}
        for role in ("probe-train", "probe-eval"):
            split = {r.split for r in audit.records(role)}
            assert split == {Split.TRAIN if role == "probe-train" else Split.TEST}

    def test_probe_seed_changes_subject_sampling(self, oracle_dataset):
        multi = generate_dataset(
            DataSpec(
                train_subjects_per_cell=4,
                test_subjects_per_cell=2,
                images_per_subject=3,
                seed=13,
            )
        )
        a1, a2 = RecordAudit(), RecordAudit()
        evaluate_domain(mean_intensity_features(multi), multi, seed=0, audit=a1)
        evaluate_domain(mean_intensity_features(multi), multi, seed=1, audit=a2)
        refs1 = [id(r) for r in a1.records("probe-train")]
        refs2 = [id(r) for r in a2.records("probe-train")]
        assert refs1 != refs2


class TestReconstructionMetrics:
    def test_means_over_test_subjects(self, tiny_dataset):
        bundle = build_bundle(
            NetworkConfig(d_u=12, d_s=2, image_shape=(1, 32, 32),
                          encoder_channels=(4, 8), predictor_hidden=8),
            seed=0,
        )
        bundle.variant = "cae"
        audit = RecordAudit()
        rm, ss = reconstruction_metrics(bundle, tiny_dataset, seed=0, audit=audit)
        assert rm >= 0.0
        assert -1.0 <= ss <= 1.0
        recs = audit.records("reconstruction")
        assert all(r.split == Split.TEST for r in recs)
        assert len({r.subject_id for r in recs}) == len(recs)
        test_subjects = {r.subject_id for r in tiny_dataset.split_records(Split.TEST)}
        assert {r.subject_id for r in recs} == test_subjects


class TestMetricsReport:
    def make(self, **overrides):
        base = dict(
            model="cae",
            rmse=0.05,
            ssim=0.9,
            disease_f1=0.8,
            domain_f1=0.95,
            latent_available=True,
            z_d_available=False,
            interpretable=False,
            alpha=None,
            seed=0,
            dataset_hash="deadbeef00000000",
        )
        base.update(overrides)
        return MetricsReport(**base)

    def test_validation(self):
        with pytest.raises(ContractError):
            self.make(model="resnet")
        with pytest.raises(ContractError):
            self.make(rmse=-0.1)
        with pytest.raises(ContractError):
            self.make(ssim=1.5)
        with pytest.raises(ContractError):
            self.make(disease_f1=1.2)

    def test_csv_renders_na_for_feature_space_models(self):
        row = self.make(model="combat", rmse=None, ssim=None,
                        latent_available=False).csv_row()
        fields = row.split(",")
        assert fields[0] == "combat"
        assert fields[1] == "n/a"
        assert fields[2] == "n/a"
        assert fields[8] == "n/a"

    def test_csv_header_and_rows_align(self, tmp_path):
        reports = [self.make(), self.make(model="pl-se-ada", alpha=0.2,
                                          z_d_available=True, interpretable=True)]
        path = tmp_path / "table.csv"
        write_reports_csv(reports, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == CSV_HEADER
        assert len(lines) == 3
        for line in lines[1:]:
            assert len(line.split(",")) == len(CSV_HEADER.split(","))
        assert lines[2].split(",")[8] == "0.2"

    def test_json_round_trip(self, tmp_path):
        report = self.make(model="pl-se-ada", alpha=0.2, z_d_available=True,
                           interpretable=True)
        path = tmp_path / "report.json"
        report.save(path)
        assert MetricsReport.load(path) == report


class TestBuildReport:
    def test_feature_source_has_na_reconstruction(self, oracle_dataset):
        report = build_report(
            "combat", oracle_dataset, seed=0,
            features=mean_intensity_features(oracle_dataset),
        )
        assert report.rmse is None
        assert report.ssim is None
        assert report.latent_available is False
        assert report.dataset_hash == oracle_dataset.content_hash()

    def test_requires_exactly_one_source(self, oracle_dataset):
        with pytest.raises(ContractError, match="exactly one"):
            build_report("cae", oracle_dataset, seed=0)

    def test_bundle_source_fills_reconstruction(self, tiny_dataset):
        bundle = build_bundle(
            NetworkConfig(d_u=12, d_s=2, image_shape=(1, 32, 32),
                          encoder_channels=(4, 8), predictor_hidden=8),
            seed=0,
        )
        bundle.variant = "cae"
        report = build_report("cae", tiny_dataset, seed=0, bundle=bundle)
        assert report.rmse is not None and report.rmse > 0
        assert report.ssim is not None
        assert report.model == "cae"
        assert 0.0 <= report.disease_f1 <= 1.0
