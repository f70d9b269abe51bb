from powertrace.cli import main

main()
