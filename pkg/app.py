#!/usr/bin/env python3
import logging
import os
import sys

from retention.cli import main


logging.basicConfig(
    level=os.getenv("RETENTION_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
sys.exit(main())
