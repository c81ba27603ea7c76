import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from embedhead.parsers import detect_format
from embedhead.parsers.emb1 import EmbeddingFile
from embedhead.parsers.ckpt import CheckpointFile
from embedhead.parsers.table import MetadataTable
from embedhead.core.common import FormatError


class Test_Parsers(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def test_emb1_layout(self):
        EmbeddingFile.write(self.path('a.emb'), ['x1', 'obs-2'], np.array([[1, 2, 3], [4, 5, 6]]))
        with open(self.path('a.emb'), 'rb') as f:
            raw = f.read()
        self.assertEqual(raw[:4], b'EMB1')
        self.assertEqual(struct.unpack_from('<IIQ', raw, 4), (1, 3, 2))
        self.assertEqual(len(raw), 20 + (2 + 2 + 12) + (2 + 5 + 12))
        ids, vectors = EmbeddingFile.read(self.path('a.emb'))
        self.assertEqual(ids, ['x1', 'obs-2'])
        self.assertEqual(vectors.dtype, np.float32)
        self.assertTrue(np.array_equal(vectors, [[1, 2, 3], [4, 5, 6]]))

    def test_emb1_corruption(self):
        EmbeddingFile.write(self.path('a.emb'), ['x1'], np.ones((1, 4)))
        with open(self.path('a.emb'), 'rb') as f:
            raw = f.read()
        for name, data in (('magic', b'EMB2' + raw[4:]), ('short', raw[:-3]), ('trailing', raw + b'\0'),
                           ('version', raw[:4] + struct.pack('<I', 7) + raw[8:]), ('header', raw[:10])):
            with open(self.path(name), 'wb') as f:
                f.write(data)
            self.assertRaises(FormatError, EmbeddingFile.read, self.path(name))

    def test_emb1_count_beyond_file(self):
        with open(self.path('huge.emb'), 'wb') as f:
            f.write(EmbeddingFile.HEADER.pack(b'EMB1', 1, 1024, 2**40))
        with self.assertRaises(FormatError) as ctx:
            EmbeddingFile.read(self.path('huge.emb'))
        self.assertIn('declares', str(ctx.exception))

    def test_ckpt_roundtrip_float32(self):
        tensors = {'hidden.weight': np.array([[0.1, 0.2], [0.3, 0.4]]), 'hidden.bias': np.array([1.0, -1.0])}
        meta = {'config': {'kind': 'mlp'}, 'epoch': 3, 'path': 'a/b'}
        CheckpointFile.write(self.path('m.ckpt'), tensors, meta)
        back, meta_back = CheckpointFile.read(self.path('m.ckpt'))
        self.assertEqual(list(back), ['hidden.weight', 'hidden.bias'])
        self.assertEqual(meta_back, meta)
        self.assertTrue(np.array_equal(back['hidden.weight'], tensors['hidden.weight'].astype(np.float32)))

    def test_ckpt_corruption(self):
        CheckpointFile.write(self.path('m.ckpt'), {'w': np.ones((3, 3))}, {'config': {}})
        with open(self.path('m.ckpt'), 'rb') as f:
            raw = f.read()
        for name, data in (('magic', b'XXXX' + raw[4:]), ('tensor', raw[:-5]), ('blob', raw[:14])):
            with open(self.path(name), 'wb') as f:
                f.write(data)
            self.assertRaises(FormatError, CheckpointFile.read, self.path(name))

    def test_table_typing(self):
        with open(self.path('m.csv'), 'w') as f:
            f.write("observation_id,species,poisonous,month,latitude,habitat\n")
            f.write("a,sp0,1,5,55.5,forest\n")
            f.write("b,sp1,0,,,\n")
        rows = MetadataTable.read(self.path('m.csv'))
        self.assertEqual(rows[0]['poisonous'], True)
        self.assertEqual(rows[0]['month'], 5)
        self.assertEqual(rows[0]['latitude'], 55.5)
        self.assertEqual(rows[0]['habitat'], 'forest')
        self.assertIsNone(rows[1]['month'])
        self.assertIsNone(rows[1]['genus'])

    def test_table_errors(self):
        cases = {
            'nocol.csv': "observation_id,species\na,sp0\n",
            'poison.csv': "observation_id,species,poisonous\na,sp0,yes\n",
            'month.csv': "observation_id,species,poisonous,month\na,sp0,0,13\n",
            'empty.csv': "observation_id,species,poisonous\na,,0\n",
            'blank.csv': "",
        }
        for name, text in cases.items():
            with open(self.path(name), 'w') as f:
                f.write(text)
            self.assertRaises(FormatError, MetadataTable.read, self.path(name))

    def test_table_not_utf8(self):
        with open(self.path('latin.csv'), 'wb') as f:
            f.write(b'observation_id,species\n\xff\xfe,x\n')
        with self.assertRaises(FormatError) as ctx:
            MetadataTable.read(self.path('latin.csv'))
        self.assertIn('UTF-8', str(ctx.exception))

    def test_table_unlabelled(self):
        with open(self.path('u.csv'), 'w') as f:
            f.write("observation_id\nq1\nq2\n")
        rows = MetadataTable.read(self.path('u.csv'), require_labels=False)
        self.assertEqual([r['observation_id'] for r in rows], ['q1', 'q2'])
        self.assertIsNone(rows[0]['species'])

    def test_detect_format(self):
        EmbeddingFile.write(self.path('a.emb'), ['x'], np.ones((1, 2)))
        CheckpointFile.write(self.path('a.ckpt'), {}, {'config': {}})
        MetadataTable.write(self.path('a.csv'), [{'observation_id': 'x', 'species': 's', 'poisonous': False}])
        self.assertIs(detect_format(self.path('a.emb')), EmbeddingFile)
        self.assertIs(detect_format(self.path('a.ckpt')), CheckpointFile)
        self.assertIs(detect_format(self.path('a.csv')), MetadataTable)
        with open(self.path('junk'), 'wb') as f:
            f.write(b'hello')
        self.assertRaises(FormatError, detect_format, self.path('junk'))
        self.assertRaises(FormatError, detect_format, self.path('absent'))


if __name__ == "__main__":
    unittest.main()
