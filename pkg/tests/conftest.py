import numpy as np
import pytest

from haloscan import (
    LineshapeParams,
    ReceiverParams,
    make_baseline_model,
    make_tuning_plan,
    thermal_quanta,
)

REF_NU = 4.14e9
REF_KAPPA_L = 88.1e3


@pytest.fixture(scope="session")
def ref_receiver():
    """Squeezed operating point used throughout: eta=2/3, G_s=0.10 so the
    delivered factor is exactly 0.400."""
    return ReceiverParams(
        nu_c=REF_NU,
        kappa_l=REF_KAPPA_L,
        beta=7.1,
        n_c0=0.41,
        n_f=thermal_quanta(REF_NU, 0.061),
        eta=2.0 / 3.0,
        g_s=0.10,
        n_a=0.03,
    )


@pytest.fixture(scope="session")
def unsqueezed_receiver(ref_receiver):
    import dataclasses

    return dataclasses.replace(ref_receiver, g_s=1.0, beta=2.8)


@pytest.fixture(scope="session")
def default_lineshape():
    return LineshapeParams()


@pytest.fixture
def small_plan():
    """9 steps, 85 kHz apart, centered near the reference frequency."""
    return make_tuning_plan(4.1396e9, 4.14028e9, 85e3, beta=7.1, master_seed=77)


@pytest.fixture
def flat_baseline():
    return make_baseline_model(77, excursion=0.0, step_excursion=0.0)


@pytest.fixture
def wavy_baseline():
    return make_baseline_model(77, n_components=(3, 5), excursion=0.30)


def make_receiver(**overrides):
    base = dict(
        nu_c=REF_NU,
        kappa_l=REF_KAPPA_L,
        beta=7.1,
        n_c0=0.41,
        n_f=thermal_quanta(REF_NU, 0.061),
        eta=2.0 / 3.0,
        g_s=0.10,
        n_a=0.03,
    )
    base.update(overrides)
    return ReceiverParams(**base)


def rng_array(seed, n):
    return np.random.default_rng(seed).standard_normal(n)
