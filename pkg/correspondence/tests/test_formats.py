import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from correspondence.exceptions import FormatError
from correspondence.formats import (
    FLO_MAGIC, quantize_image, read_flo, read_image, read_key_value_config, read_keypoints,
    read_manifest, read_matches, read_pfm, write_curve_csv, write_flo, write_image,
    write_manifest, write_matches, write_pfm,
)
from correspondence.geometry import FlowField


class FormatTestCase(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self._tmp.cleanup()


class FlowFileTest(FormatTestCase):
    """Middlebury .flo files"""

    def test_header_layout(self):
        """Magic, width and height are little-endian"""
        path = self.tmp / 'f.flo'
        write_flo(path, FlowField.zeros(5, 3))
        data = path.read_bytes()
        self.assertEqual(data[:4], b'PIEH')
        self.assertEqual(np.frombuffer(data[:4], '<f4')[0], np.float32(FLO_MAGIC))
        self.assertEqual(tuple(np.frombuffer(data[4:12], '<i4')), (5, 3))
        self.assertEqual(len(data), 12 + 5 * 3 * 8)

    def test_rewrite_is_byte_identical(self):
        """Write, read and write again reproduces the same bytes"""
        for i in range(100):
            h, w = self.rng.integers(1, 20, size=2)
            vectors = self.rng.normal(scale=10.0, size=(h, w, 2)).astype(np.float32)
            valid = self.rng.random((h, w)) > 0.1
            first, second = self.tmp / f'a{i}.flo', self.tmp / f'b{i}.flo'
            write_flo(first, FlowField(vectors, valid))
            write_flo(second, read_flo(first))
            self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_invalid_pixels_survive(self):
        """Invalid pixels are stored as the sentinel and read back invalid"""
        valid = np.array([[True, False], [True, True]])
        path = self.tmp / 'f.flo'
        write_flo(path, FlowField(np.ones((2, 2, 2)), valid))
        flow = read_flo(path)
        np.testing.assert_array_equal(flow.valid, valid)
        np.testing.assert_array_equal(flow.vectors[valid], 1.0)

    def test_bad_magic_rejected(self):
        """Files without the magic number are not flow files"""
        path = self.tmp / 'bad.flo'
        path.write_bytes(b'\x00' * 20)
        with self.assertRaises(FormatError):
            read_flo(path)

    def test_truncated_data_rejected(self):
        """Missing payload bytes are reported"""
        path = self.tmp / 'f.flo'
        write_flo(path, FlowField.zeros(4, 4))
        path.write_bytes(path.read_bytes()[:-4])
        with self.assertRaises(FormatError):
            read_flo(path)


class PfmTest(FormatTestCase):
    """Single-channel portable float maps"""

    def test_rewrite_is_byte_identical(self):
        """Write, read and write again reproduces the same bytes"""
        for i in range(100):
            h, w = self.rng.integers(1, 20, size=2)
            grid = self.rng.random((h, w)).astype(np.float32)
            first, second = self.tmp / f'a{i}.pfm', self.tmp / f'b{i}.pfm'
            write_pfm(first, grid)
            write_pfm(second, read_pfm(first))
            self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_row_order(self):
        """Top row on disk is the last row of the map"""
        grid = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = self.tmp / 'g.pfm'
        write_pfm(path, grid)
        np.testing.assert_array_equal(read_pfm(path), grid)
        payload = np.frombuffer(path.read_bytes()[len(b'Pf\n3 2\n-1.0\n'):], '<f4')
        np.testing.assert_array_equal(payload[:3], [3, 4, 5])

    def test_big_endian_files_are_read(self):
        """A positive scale selects big-endian data"""
        grid = np.array([[1.5, -2.0]], dtype='>f4')
        path = self.tmp / 'be.pfm'
        path.write_bytes(b'Pf\n2 1\n1.0\n' + grid.tobytes())
        np.testing.assert_array_equal(read_pfm(path), [[1.5, -2.0]])

    def test_multichannel_write_rejected(self):
        """Only 2-D maps are written"""
        with self.assertRaises(FormatError):
            write_pfm(self.tmp / 'x.pfm', np.zeros((2, 2, 3)))


class ImageTest(FormatTestCase):
    """8-bit PPM and PNG images"""

    def test_ppm_round_trip(self):
        """A quantised image survives PPM storage exactly"""
        image = quantize_image(self.rng.random((6, 7, 3)))
        path = self.tmp / 'i.ppm'
        write_image(path, image)
        self.assertEqual(path.read_bytes()[:2], b'P6')
        np.testing.assert_array_equal(read_image(path), image)

    def test_png_round_trip(self):
        """PNG is chosen by suffix"""
        image = quantize_image(self.rng.random((5, 4, 3)))
        path = self.tmp / 'i.png'
        write_image(path, image)
        np.testing.assert_array_equal(read_image(path), image)

    def test_unreadable_image(self):
        """Garbage bytes raise a format error"""
        path = self.tmp / 'bad.ppm'
        path.write_bytes(b'not an image')
        with self.assertRaises(FormatError):
            read_image(path)


class TextFormatTest(FormatTestCase):
    """Config, match, keypoint, curve and manifest files"""

    def test_key_value_config(self):
        """Comments and blank lines are skipped, values are stripped"""
        path = self.tmp / 'run.cfg'
        path.write_text("# comment\nseed = 3\n\ngamma=0.2  # inline\n", encoding='utf-8')
        self.assertEqual(read_key_value_config(path), {'seed': '3', 'gamma': '0.2'})

    def test_key_value_config_rejects_bare_words(self):
        """Lines without '=' are malformed"""
        path = self.tmp / 'run.cfg'
        path.write_text("seed\n", encoding='utf-8')
        with self.assertRaises(FormatError):
            read_key_value_config(path)

    def test_matches_round_trip(self):
        """Match CSV keeps the documented header and values"""
        path = self.tmp / 'm.csv'
        ref = np.array([[1.0, 2.0], [3.5, 4.25]])
        query = np.array([[5.0, 6.0], [7.0, 8.0]])
        confidence = np.array([0.5, 1.0])
        write_matches(path, ref, query, confidence)
        self.assertTrue(path.read_text(encoding='utf-8').startswith('xr,yr,xq,yq,confidence\n'))
        r, q, c = read_matches(path)
        np.testing.assert_array_equal(r, ref)
        np.testing.assert_array_equal(q, query)
        np.testing.assert_array_equal(c, confidence)

    def test_keypoints(self):
        """Keypoint CSV needs the x,y header"""
        path = self.tmp / 'k.csv'
        path.write_text("x,y\n1,2\n3.5,4\n", encoding='utf-8')
        np.testing.assert_array_equal(read_keypoints(path), [[1, 2], [3.5, 4]])
        path.write_text("u,v\n1,2\n", encoding='utf-8')
        with self.assertRaises(FormatError):
            read_keypoints(path)

    def test_curve_csv(self):
        """Curves are written as fraction,value rows"""
        path = self.tmp / 'c.csv'
        write_curve_csv(path, [0.0, 0.5], [1.0, 0.25])
        self.assertEqual(path.read_text(encoding='utf-8').splitlines(),
                         ['fraction,value', '0,1', '0.5,0.25'])

    def test_manifest_round_trip(self):
        """Manifests are sorted JSON"""
        path = self.tmp / 'manifest.json'
        write_manifest(path, {'seed': 1, 'count': 2})
        self.assertEqual(read_manifest(path), {'seed': 1, 'count': 2})
        path.write_text('{', encoding='utf-8')
        with self.assertRaises(FormatError):
            read_manifest(path)
