#!/usr/bin/env python

"""The setup script."""

from setuptools import setup, find_packages

with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read()

requirements = [
    'numpy>=1.20',
    'pandas>=1.1',
    'matplotlib>=3.5',
    'tabulate>=0.8.0',
    'scikit-image>=0.19',
    'scipy>=1.6',
    'tqdm>=4.50',
]

test_requirements = ['pytest>=3', ]

setup(
    author="Nael Aqel",
    author_email='dev@naelaqel.com',
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    description="Pose, flow and RGB stream action recognition with "
                "gated 3D ResNets, late fusion and logit distillation",
    entry_points={
        'console_scripts': [
            'posestream=posestream.cli:main',
        ],
    },
    install_requires=requirements,
    license="MIT license",
    long_description=readme + '\n\n' + history,
    include_package_data=True,
    keywords=['posestream', 'action recognition', 'pose', 'optical flow',
              'distillation', 'grad-cam', 'video'],
    name='posestream',
    packages=find_packages(include=['posestream', 'posestream.*']),
    test_suite='tests',
    tests_require=test_requirements,
    url='https://github.com/naelaqel/posestream',
    version='0.1.0',
    zip_safe=False,
)
