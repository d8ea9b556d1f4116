import numpy as np
import pytest

from geoinfer import cli
from geoinfer import data as gd
from geoinfer import imputation as gi
from geoinfer import predictor as gp


@pytest.fixture(scope="session")
def soil():
    return gd.builtin_soil_dataset()


@pytest.fixture(scope="session")
def soil_ctx(soil):
    train, _ = soil
    cfg = cli.resolve_config("soil-demo", {}, env={})
    return gp.build_context(train, "soil", cli.hyper_from_config(cfg))


@pytest.fixture(scope="session")
def oracle42():
    return gd.generate_oracle_benchmark(42, n_train=500, n_test=40, missing_rate=0.5)


@pytest.fixture(scope="session")
def oracle_run(oracle42):
    return gi.run_icm(oracle42.train, oracle42.test, gi.ImputationConfig(), oracle42.truth)


def regression_table(x: np.ndarray, y: np.ndarray) -> gd.DataTable:
    d = x.shape[1]
    schema = [gd.ColumnSchema(f"x{j}", gd.INDEX_FEATURE) for j in range(d)] + [gd.ColumnSchema("y", gd.MECHANICAL_TARGET)]
    return gd.make_table(schema, np.column_stack([x, y]))
