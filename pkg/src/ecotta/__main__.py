from .benchcli import main

raise SystemExit(main())
