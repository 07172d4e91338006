import pytest

from oocsched.zoo import swap_timeline_fixture


@pytest.fixture
def timeline():
    """Six uniform blocks, swap twice as slow as compute, room for three."""
    return swap_timeline_fixture()


GOLD_PLAN = ("F1 → F2||S1out → F3 → F4||S3out → F5 → F6 → "
             "B6||S3in → B5 → F4 → B4||S1in → B3 → F2 → B2 → B1")
