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

from setuptools import setup


with open("./README.md", 'r') as file:
    long_d = file.read()


setup(
    name="clinaudit",
    version="1.0.0",
    py_modules=["_clinaudit"],
    packages=["clinaudit", "clinaudit.utils"],
    package_dir={
        "": "scripts",
        "clinaudit": "src/clinaudit"
    },
    package_data={
        "clinaudit": ["resources/*.json"]
    },
    entry_points={
        "console_scripts": ["clinaudit = _clinaudit:main"]
    },
    license="GNU GPLv3",
    author="The clinaudit authors",
    description="Adversarial robustness and cross-lingual drift audits for clinical AI models.",
    long_description=long_d,
    long_description_content_type="text/markdown",
    install_requires=[
        "colorama",
        "numpy",
        "scipy",
        "Pillow",
        "requests"
    ],
    python_requires=">=3.11"
)
