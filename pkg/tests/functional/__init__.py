# Common code for running functests

import os, sys
import time
import shutil
import logging
import tempfile
import unittest

from embedhead.core.api import API
from embedhead.core.settings import load_settings


logger = logging.getLogger(__name__)
logger.setLevel(logging.WARNING)
logger.addHandler(logging.StreamHandler(sys.stdout))

DELETE_WORKDIR = True


class TestLayer(unittest.TestCase):
    '''
    Synthesizes a dataset and prepares it once per test class;
    subclasses set __overrides__ to change the run configuration
    '''
    report = logger
    __overrides__ = []

    @classmethod
    def setUpClass(cls):
        cls.starttime = time.time()
        cls.workdir = tempfile.mkdtemp(prefix='embedhead_test_')
        cls.settings = load_settings(overrides=cls.__overrides__)
        cls.engine = API(cls.settings)
        cls.manifest = cls.engine.synth(os.path.join(cls.workdir, 'data'))
        cls.prepared_dir = os.path.join(cls.workdir, 'prepared')
        cls.prepared = cls.engine.prepare(cls.manifest, cls.prepared_dir)
        cls.perf = time.time() - cls.starttime
        cls.report.info("test dataset prepared in %1.2f sec" % cls.perf)

    @classmethod
    def tearDownClass(cls):
        failed = getattr(cls, 'failed', False)
        if DELETE_WORKDIR and not failed:
            shutil.rmtree(cls.workdir, ignore_errors=True)
        else:
            cls.report.warning("%s is kept" % cls.workdir)

    def engine_with(self, *overrides):
        return API(load_settings(overrides=list(self.__overrides__) + list(overrides)))

    def path(self, *parts):
        return os.path.join(self.workdir, *parts)
