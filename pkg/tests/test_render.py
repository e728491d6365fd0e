import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from semifmm.dataset import SurfaceGrid
from semifmm.errors import ValidationError
from semifmm.render import DIVERGING, colorize, heatmap


class TestRender(unittest.TestCase):
    def test_colorize_anchors(self):
        rgb = colorize(np.array([-1.0, 0.0, 1.0]), (-1.0, 1.0), DIVERGING)
        self.assertEqual(rgb.dtype, np.uint8)
        self.assertEqual(tuple(rgb[0]), DIVERGING[0][1])
        self.assertEqual(tuple(rgb[1]), DIVERGING[1][1])
        self.assertEqual(tuple(rgb[2]), DIVERGING[2][1])

    def test_heatmap_size_and_orientation(self):
        grid = SurfaceGrid(8, 16)
        surface = np.zeros(grid.shape)
        surface[0, :] = -1.0
        surface[-1, :] = 1.0
        with tempfile.TemporaryDirectory() as temp_dir:
            path = heatmap(surface, grid, Path(temp_dir) / "maps" / "x.png", scale=3)
            with Image.open(path) as image:
                self.assertEqual(image.size, (48, 24))
                self.assertEqual(image.getpixel((0, 0)), DIVERGING[0][1])
                self.assertEqual(image.getpixel((0, 23)), DIVERGING[2][1])

    def test_heatmap_rejects_bad_surfaces(self):
        grid = SurfaceGrid(8, 8)
        with tempfile.TemporaryDirectory() as temp_dir:
            with self.assertRaises(ValidationError):
                heatmap(np.zeros(10), grid, Path(temp_dir) / "x.png")
            with self.assertRaises(ValidationError):
                heatmap(np.full(64, np.nan), grid, Path(temp_dir) / "y.png")


if __name__ == "__main__":
    unittest.main()
