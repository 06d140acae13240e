from msfem.doctor import PACKAGES, diagnose_environment


def test_doctor_returns_expected_keys() -> None:
    res = diagnose_environment()
    # keys exist regardless of environment
    assert "python" in res
    for name in PACKAGES:
        assert name in res
        assert res[name]["present"] in ("True", "False")
    assert res["numpy"]["present"] == "True"
    assert res["scipy"]["splu"] == "True"
