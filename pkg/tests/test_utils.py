#    clinaudit - A safety audit toolkit for clinical classifiers and language models
#    Copyright (C) 2026  The clinaudit authors

#    This program is free software: you can redistribute it and/or modify
#    it under the terms of the GNU General Public License as published by
#    the Free Software Foundation, either version 3 of the License, or
#    (at your option) any later version.

#    This program is distributed in the hope that it will be useful,
#    but WITHOUT ANY WARRANTY; without even the implied warranty of
#    MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#    GNU General Public License for more details.

#    You should have received a copy of the GNU General Public License
#    along with this program.  If not, see <https://www.gnu.org/licenses/>.

import io
import os
import tempfile
import unittest
from contextlib import redirect_stderr
import numpy as np
import helpers
from clinaudit.errors import AuditIOError, ValidationError
from clinaudit.utils import (SplitMix64, TabWriter, audit_log, set_verbose, fingerprint, format_percent, read_json,
                             write_json, chunks)


class TestSplitMix64(unittest.TestCase):
    def test_reproducible(self):
        a, b = SplitMix64(42), SplitMix64(42)
        self.assertEqual([a.next_u64() for _ in range(5)], [b.next_u64() for _ in range(5)])

    def test_fork_ignores_consumption(self):
        a, b = SplitMix64(9), SplitMix64(9)
        a.uniform()
        self.assertEqual(a.fork(3).next_u64(), b.fork(3).next_u64())
        self.assertNotEqual(b.fork(3).next_u64(), b.fork(4).next_u64())

    def test_block_matches_scalar_draws(self):
        a, b = SplitMix64(5), SplitMix64(5)
        np.testing.assert_array_equal([a.uniform() for _ in range(17)], b.uniform_block(17))
        self.assertEqual(a.uniform(), b.uniform())

    def test_uniform_range(self):
        values = SplitMix64(1).uniform_block(10000)
        self.assertGreaterEqual(values.min(), 0.0)
        self.assertLess(values.max(), 1.0)
        self.assertAlmostEqual(0.5, values.mean(), delta=0.02)

    def test_normal_moments(self):
        values = SplitMix64(2).normal_block(20001)
        self.assertEqual(20001, len(values))
        self.assertAlmostEqual(0.0, values.mean(), delta=0.03)
        self.assertAlmostEqual(1.0, values.std(), delta=0.03)

    def test_randint_and_shuffle(self):
        rng = SplitMix64(3)
        draws = [rng.randint(2, 4) for _ in range(300)]
        self.assertEqual({2, 3, 4}, set(draws))
        items = rng.shuffle(list(range(50)))
        self.assertEqual(list(range(50)), sorted(items))
        self.assertNotEqual(list(range(50)), items)


class TestFormatting(unittest.TestCase):
    def test_percent(self):
        self.assertEqual("89.3", format_percent(0.893))
        self.assertEqual("-16.6", format_percent(0.727 - 0.893, signed=True))
        self.assertEqual("+0.0", format_percent(-0.00001, signed=True))
        self.assertEqual("50", format_percent(0.5, 0))

    def test_fingerprint(self):
        self.assertEqual(12, len(fingerprint({"a": 1})))
        self.assertEqual(fingerprint({"a": 1, "b": 2}), fingerprint({"b": 2, "a": 1}))

    def test_chunks(self):
        self.assertEqual([[1, 2], [3]], chunks([1, 2, 3], 2))


class TestTabWriter(unittest.TestCase):
    def test_nested(self):
        writer = TabWriter()

        with writer.nested("<g>", "</g>"):
            writer.writeline("<rect/>")
            writer.writeline()

        self.assertEqual("<g>\n    <rect/>\n\n</g>\n", writer.getvalue())

    def test_table(self):
        writer = TabWriter()
        writer.write_table(["name", "value"], [["a", "1.0"], ["long", "10.0"]], (False, True))
        lines = writer.getvalue().splitlines()
        self.assertEqual("name  value", lines[0])
        self.assertEqual("----  -----", lines[1])
        self.assertEqual("a       1.0", lines[2])
        self.assertEqual("long   10.0", lines[3])


class TestFiles(unittest.TestCase):
    def test_json_layout(self):
        with tempfile.TemporaryDirectory() as root:
            path = write_json(os.path.join(root, "doc.json"), {"b": 1, "a": [1, 2]})

            with open(path, 'rb') as file:
                data = file.read()

            self.assertTrue(data.endswith(b"}\n"))
            self.assertLess(data.index(b'"a"'), data.index(b'"b"'))
            self.assertEqual({"a": [1, 2], "b": 1}, read_json(path))

    def test_errors(self):
        with tempfile.TemporaryDirectory() as root:
            self.assertRaises(AuditIOError, read_json, os.path.join(root, "absent.json"))
            broken = os.path.join(root, "broken.json")

            with open(broken, 'w') as file:
                file.write("{")

            self.assertRaises(ValidationError, read_json, broken)


class TestLogging(unittest.TestCase):
    def tearDown(self):
        set_verbose(False)

    def test_remarks_need_verbose(self):
        stream = io.StringIO()

        with redirect_stderr(stream):
            audit_log("quiet remark", source="test", severity=1)
            audit_log("loud warning", source="test", severity=2)

        self.assertNotIn("quiet remark", stream.getvalue())
        self.assertIn("loud warning", stream.getvalue())
        self.assertTrue(stream.getvalue().startswith("[test]........"))

    def test_verbose(self):
        set_verbose(True)
        stream = io.StringIO()

        with redirect_stderr(stream):
            audit_log("remark", source="test", severity=1)

        self.assertIn("remark", stream.getvalue())


if __name__ == "__main__":
    unittest.main()
