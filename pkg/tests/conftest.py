import pytest

from resdyn.datagen import SplitRecipe, generate_dataset
from resdyn.vehicle import VehicleConfig

TINY_RECIPE = SplitRecipe(n_train_conditions=2, train_masses=(1900.0, 2100.0),
                          holdout_mass=2000.0, n_val2_conditions=1,
                          duration=6.0, dt=0.01)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """Small but real co-simulated dataset shared across test modules."""
    out = str(tmp_path_factory.mktemp("tinydata"))
    generate_dataset(out, TINY_RECIPE, VehicleConfig(), seed=5)
    return out
