import os
import shutil
import tempfile
import unittest

from embedhead.core import settings as S
from embedhead.core.common import SettingsError, write_json


class Test_Settings(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_defaults_validate(self):
        settings = S.load_settings()
        self.assertEqual(settings['train']['epochs'], 30)
        self.assertEqual(settings['loss']['kind'], 'seesaw')
        self.assertEqual(settings['train']['scheduler']['kind'], 'cosine_warm_restarts')

    def test_defaults_not_mutated(self):
        S.load_settings(overrides=['train.epochs=3'])
        self.assertEqual(S.DEFAULT_SETUP['train']['epochs'], 30)

    def test_parse_override(self):
        self.assertEqual(S.parse_override('train.lr=1e-3'), (['train', 'lr'], 0.001))
        self.assertEqual(S.parse_override('model.kind=fusion'), (['model', 'kind'], 'fusion'))
        self.assertEqual(S.parse_override('model.aux_heads.taxonomy=["genus"]'), (['model', 'aux_heads', 'taxonomy'], ['genus']))
        self.assertRaises(SettingsError, S.parse_override, 'train.lr')

    def test_overrides_apply(self):
        settings = S.load_settings(overrides=['train.epochs=3', 'loss.kind=focal', 'loss.aux_weights={"genus": 0.5}'])
        self.assertEqual(settings['train']['epochs'], 3)
        self.assertEqual(settings['loss']['kind'], 'focal')
        self.assertEqual(settings['loss']['aux_weights'], {'genus': 0.5})

    def test_unknown_key_rejected(self):
        with self.assertRaises(SettingsError) as ctx:
            S.load_settings(overrides=['train.epoch=3'])
        self.assertIn('train.epoch', str(ctx.exception))

    def test_invalid_values_rejected(self):
        for expr in ('train.lr=0', 'model.dropout=1', 'loss.kind=hinge', 'train.rank_metric=auc',
                     'train.scheduler.factor=1.5', 'sampler.floor_eps=0', 'model.aux_heads.taxonomy=["kingdom"]',
                     'train.epochs="ten"'):
            self.assertRaises(SettingsError, S.load_settings, None, [expr])

    def test_alpha_requires_poison_head(self):
        self.assertRaises(SettingsError, S.load_settings, None, ['model.aux_heads.poison=false'])
        settings = S.load_settings(overrides=['model.aux_heads.poison=false', 'loss.alpha=0'])
        self.assertFalse(settings['model']['aux_heads']['poison'])

    def test_file_then_overrides(self):
        path = os.path.join(self.tmp, 'run.json')
        write_json(path, {'train': {'epochs': 5, 'batch': 16}})
        settings = S.load_settings(path, ['train.epochs=7'])
        self.assertEqual((settings['train']['epochs'], settings['train']['batch']), (7, 16))

    def test_missing_or_bad_file(self):
        self.assertRaises(SettingsError, S.load_settings, os.path.join(self.tmp, 'absent.json'))
        path = os.path.join(self.tmp, 'bad.json')
        with open(path, 'w') as f:
            f.write('[1, 2')
        self.assertRaises(SettingsError, S.load_settings, path)

    def test_derive_seed_streams(self):
        self.assertEqual(S.derive_seed(0, 'init:0'), S.derive_seed(0, 'init:0'))
        self.assertNotEqual(S.derive_seed(0, 'init:0'), S.derive_seed(0, 'init:1'))
        self.assertNotEqual(S.derive_seed(0, 'init:0'), S.derive_seed(1, 'init:0'))
        self.assertTrue(0 <= S.derive_seed(7, 'sampler:1') < 2**32)

    def test_thread_count(self):
        saved = os.environ.get(S.THREADS_ENV)
        try:
            os.environ[S.THREADS_ENV] = '4'
            self.assertEqual(S.thread_count(), 4)
            os.environ[S.THREADS_ENV] = '0'
            self.assertEqual(S.thread_count(), 1)
            os.environ[S.THREADS_ENV] = 'many'
            self.assertRaises(SettingsError, S.thread_count)
        finally:
            if saved is None:
                os.environ.pop(S.THREADS_ENV, None)
            else:
                os.environ[S.THREADS_ENV] = saved

    def test_metric_direction(self):
        self.assertTrue(S.is_higher_better('top1'))
        self.assertFalse(S.is_higher_better('track3'))
        self.assertFalse(S.is_higher_better('val_loss'))


if __name__ == "__main__":
    unittest.main()
