"""
Dependency injection container for the durability lab.

Wires the environment settings, the on-disk report store, the experiment
harness and the S3 report publisher using ``dependency-injector``.
"""

from dependency_injector import containers, providers

from .config import Settings
from .harness import Lab
from .publisher import ReportPublisher
from .reports import ReportStore


class AppContainer(containers.DeclarativeContainer):
    """
    Declarative DI container for the lab.

    Provides the following providers:
    - config (Singleton[Settings]): Environment settings shared by everything
    - report_store (Factory[ReportStore]): Atomic writer; ``root`` given per call
    - lab (Factory[Lab]): Experiment harness; ``cfg`` and ``store`` given per call
    - publisher (Factory[ReportPublisher]): Uploads run records to Amazon S3
    """

    config = providers.Singleton(Settings)

    report_store = providers.Factory(ReportStore)

    lab = providers.Factory(Lab, settings=config)

    publisher = providers.Factory(
        ReportPublisher,
        bucket=config.provided.s3_bucket,
        prefix=config.provided.s3_prefix,
        endpoint_url=config.provided.s3_endpoint_url,
        region=config.provided.aws_region,
    )
