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
from contextlib import contextmanager
from typing import Iterator, List, Sequence
from ..constants import TAB


class TabWriter(io.StringIO):
    def __init__(self, *args, tabs: int = 0, **kwargs):
        """
        Indentation-aware text buffer used for the plain text summaries
        and the SVG documents of an audit bundle.

        @param args: Args to pass to io.StringIO constructor
        @param tabs: Number of starting tabs for this object
        @param kwargs: Kwargs to pass to io.StringIO constructor
        """
        super().__init__(*args, **kwargs)
        self.tabs = tabs

    def writeline(self, value: str = '') -> int:
        """
        Writes an indented line and a terminating newline. Empty lines
        are written without indentation so output has no trailing blanks.

        @param value: The string to write.
        @return: Length of data written, including newline character.
        """
        if not value:
            return self.write('\n')
        return self.write(TAB * self.tabs + value + '\n')

    def indent(self):
        self.tabs += 1

    def unindent(self):
        if self.tabs > 0:
            self.tabs -= 1

    @contextmanager
    def nested(self, opening: str, closing: str) -> Iterator["TabWriter"]:
        """
        Write an opening line, indent everything written inside the
        context, then write the closing line.

        @param opening: First line, e.g. an XML start tag.
        @param closing: Last line, e.g. the matching end tag.
        @return: Context yielding this writer.
        """
        self.writeline(opening)
        self.indent()
        try:
            yield self
        finally:
            self.unindent()
            self.writeline(closing)

    def write_table(self, header: Sequence[str], rows: Sequence[Sequence[str]], right_align: Sequence[bool] = ()):
        """
        Write a column-aligned text table with a dashed rule under the header.

        @param header: Column titles.
        @param rows: Cell strings, one sequence per row.
        @param right_align: Per-column flag; numeric columns are usually right aligned.
        @return: None
        """
        widths: List[int] = [len(h) for h in header]

        for row in rows:
            for i, cell in enumerate(row):
                widths[i] = max(widths[i], len(cell))

        def _fmt(cells: Sequence[str]) -> str:
            parts = list()
            for i, cell in enumerate(cells):
                if i < len(right_align) and right_align[i]:
                    parts.append(cell.rjust(widths[i]))
                else:
                    parts.append(cell.ljust(widths[i]))
            return "  ".join(parts).rstrip()

        self.writeline(_fmt(header))
        self.writeline("  ".join('-' * w for w in widths))

        for row in rows:
            self.writeline(_fmt(row))
