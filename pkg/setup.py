import sys
from setuptools import setup, find_packages
from outlierscope import __version__

if sys.version_info < (3, 8):
    raise EnvironmentError('Python 3.8 or greater is required')

with open('README.md', 'r') as f:
    long_description = f.read()

with open('requirements.txt') as f:
    install_requires = f.readlines()

kwargs = {
    'name': 'outlierscope',
    'version': __version__,
    'description': ('CLI tool profiling massive activations and channel-wise '
                    'outliers of decoder-only language models'),
    'long_description': long_description,
    'long_description_content_type': 'text/markdown',
    'license': 'MIT',
    'packages': find_packages(exclude=['tests']),
    'install_requires': install_requires,
    'python_requires': '>=3.8',
    'keywords': ['transformers', 'activations', 'outliers', 'perplexity'],
    'classifiers': [
        'Development Status :: 3 - Alpha',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Natural Language :: English'
    ],
    'entry_points': {
        'console_scripts': [
            'outlierscope = outlierscope.main:outlierscope'
        ]
    }
}

setup(**kwargs)
