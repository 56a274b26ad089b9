import os
import pathlib

import pytest


@pytest.fixture
def workdir(tmp_path):
    root = os.environ.get("PSPSEG_TEST_TMP")
    if not root:
        return tmp_path
    path = pathlib.Path(root) / tmp_path.name
    path.mkdir(parents=True, exist_ok=True)
    return path
