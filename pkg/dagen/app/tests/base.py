import shutil
import tempfile
import unittest

from dagen.app.tests.helpers import make_config, make_settings
from dagen.base.settings import set_settings
from dagen.metadata import DBSession


class BaseStoreTest(unittest.TestCase):
    """a fresh output directory with its own sqlite condition store per test"""

    overrides = {}

    @classmethod
    def setUpClass(cls):
        if cls is BaseStoreTest:
            raise unittest.SkipTest("Skip BaseTest tests, it's a base class")
        super(BaseStoreTest, cls).setUpClass()

    def setUp(self):
        from dagen.app.cache import clear_all_caches, init_caches
        from dagen.app.pipeline import open_store

        self.out = tempfile.mkdtemp(prefix="dagen-test-")
        set_settings(make_settings(self.out, self.overrides))
        init_caches()
        clear_all_caches()
        self.config = make_config(self.out, self.overrides)
        self.engine = open_store(self.config)

    def reconfigure(self, overrides):
        """the same output directory under changed settings"""
        merged = dict(self.overrides)
        merged.update(overrides)
        return make_config(self.out, merged)

    def tearDown(self):
        DBSession.remove()
        self.engine.dispose()
        shutil.rmtree(self.out, ignore_errors=True)
