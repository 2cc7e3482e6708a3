"""Smoke tests for the package's public surface."""
import fedseqrec


def test_all_names_resolve():
    for name in fedseqrec.__all__:
        assert getattr(fedseqrec, name) is not None, name


def test_all_is_sorted_and_unique():
    assert list(fedseqrec.__all__) == sorted(set(fedseqrec.__all__))


def test_version_is_a_string():
    major, minor, patch = fedseqrec.__version__.split(".")
    assert all(part.isdigit() for part in (major, minor, patch))


def test_quickstart_surface():
    """The README's minimal flow: generate, fit, evaluate, recommend."""
    datasets = fedseqrec.generate_synthetic(fedseqrec.ScenarioConfig(
        num_domains=2, users=24, shared_factors=4, exclusive_factors=4,
        vocab_per_domain=40, seed=3,
    ))
    est = fedseqrec.FederatedSequenceRecommender(
        embed_dim=8, num_gnn_layers=1, num_attn_layers=1, num_heads=2,
        rounds=1, local_epochs=1, batch_size=16, eval_negatives=20, seed=3,
    ).fit(datasets)
    result = est.evaluate("test")
    assert 0 < result.average["mrr"] <= 1
    top = est.predict("domain_a", [[1, 2, 3]], k=3)
    assert top.shape == (1, 3)
