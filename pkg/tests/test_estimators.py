import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gfm_fdi.detection import FaultWindow
from gfm_fdi.estimators import ObserverSynthesizer, ResidualDetector, SectorConstantsEstimator
from gfm_fdi.microgrid import operating_region
from gfm_fdi.sector import OperatingRegion, published_constants


def test_params_and_clone():
    est = ObserverSynthesizer(fault="bridge", alpha=3.0)
    assert est.get_params()["fault"] == "bridge"
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(beta=7.0)
    assert est.beta == 7.0
    assert ResidualDetector(margin=0.2).get_params()["margin"] == 0.2


def test_sector_estimator_on_a_cubic():
    region = OperatingRegion([[-1.0, 1.0]], [[0.0, 1.0]])
    est = SectorConstantsEstimator(n_samples=4000).fit(lambda x, u: -x ** 3, region)
    gamma, rho, delta, phi = est.transform()
    assert gamma == pytest.approx(3.15, rel=1e-3)
    assert rho <= 0.01
    assert est.score(lambda x, u: -x ** 3) == 1.0


def test_sector_estimator_on_the_inverter(params12, steady):
    est = SectorConstantsEstimator(n_samples=2000, seed=1).fit(params12, operating_region(steady))
    assert est.constants_.gamma >= est.constants_.rho
    assert 0.99 <= est.score(params12, n_samples=2000) <= 1.0
    with pytest.raises(ValueError):
        SectorConstantsEstimator(n_samples=1).fit(params12, operating_region(steady))


def test_synthesizer_fit_transform(params12):
    est = ObserverSynthesizer(fault="busbar", constants=published_constants()).fit(params12)
    assert est.design_.verified
    X = np.zeros((3, 7))
    X[1, 0] = 1.0
    out = est.transform(X)
    np.testing.assert_allclose(out[1], est.gain_[:, 0])
    assert not out[0].any()
    with pytest.raises(ValueError):
        est.transform(np.zeros((1, 6)))


def test_synthesizer_validates_hyperparameters(params12):
    with pytest.raises(ValueError):
        ObserverSynthesizer(constants=None).fit(params12)
    with pytest.raises(ValueError):
        ObserverSynthesizer(fault="meteor", constants=published_constants()).fit(params12)
    with pytest.raises(ValueError):
        ObserverSynthesizer(method="hinf", constants=published_constants()).fit(params12)
    with pytest.raises(TypeError):
        ObserverSynthesizer(constants=published_constants()).fit("not a model")
    with pytest.raises(NotFittedError):
        ObserverSynthesizer().transform(np.zeros((1, 7)))


def test_detector_fit_predict_report():
    rng = np.random.default_rng(0)
    calib = np.abs(rng.normal(0, 1, 5000))
    det = ResidualDetector(dt=1e-4, margin=0.1).fit(calib)
    assert det.threshold_.J_th == pytest.approx(1.1 * calib.max())
    J = np.abs(rng.normal(0, 0.5, 3000))
    J[1000:1500] += 100.0
    alarms = det.predict(J)
    assert alarms[1000:1500].all()
    rep = det.report(J, [(0.1, 0.15)])
    assert rep.events[0].detected and rep.events[0].t_o == pytest.approx(1e-4)
    assert rep.false_alarms == 0


def test_detector_with_lowpass_and_window_rule():
    det = ResidualDetector(dt=1e-3, lowpass_hz=5.0, longest_fault=0.2)
    with pytest.raises(ValueError):
        det.fit(np.ones(100))
    det.fit(np.ones(2000))
    assert det.transform(np.ones(10)) == pytest.approx(np.ones(10))
    with pytest.raises(ValueError):
        det.fit(-np.ones(2000))
    with pytest.raises(NotFittedError):
        ResidualDetector().predict(np.ones(3))
    assert det.report(np.zeros(50), [FaultWindow(0.01, 0.02)]).events[0].detected is False
