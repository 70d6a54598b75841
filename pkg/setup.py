from setuptools import find_packages, setup

import os
from glob import glob

package_name = 'lgf_demos'

setup(
    name=package_name,
    version='0.1.0',
    packages=find_packages(exclude=['test']),
    data_files=[
        (os.path.join('share', package_name, 'config'), glob('config/*.yaml')),
        (os.path.join('share', package_name, 'config', 'grammars'), glob('config/grammars/*.grammar')),
    ],
    python_requires='>=3.9',
    install_requires=[
        'setuptools',
        'numpy',
        'scipy',
        'torch',
        'pandas',
        'pyyaml',
        'tqdm',
        'nltk',
    ],
    zip_safe=True,
    maintainer='ingui',
    maintainer_email='ingui2@illinois.edu',
    description='Latent grammar flow demos: ODE discovery from noisy trajectories.',
    license='MIT',
    tests_require=['pytest', 'flake8'],
    extras_require={'test': ['pytest', 'flake8']},
    entry_points={
        'console_scripts': [
            'lgf = lgf_demos.lgf_main:main',
        ],
    },
)
