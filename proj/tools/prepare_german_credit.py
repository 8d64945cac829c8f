#!/usr/bin/env python3
"""Convert the Statlog (German Credit) `german.data` file into the calm case format.

The raw file is whitespace-delimited with 20 attributes followed by the class
(1 = good, 2 = bad). Categorical attributes keep their original A-codes as
levels. Rows receive 1-based case ids in file order.

usage: prepare_german_credit.py german.data > german_credit.csv
"""
import csv
import sys

CUES = [
    "checking_account", "duration", "credit_history", "purpose", "credit_amount",
    "savings", "employment_since", "installment_rate", "personal_status_sex",
    "other_debtors", "residence_since", "property", "age_years",
    "other_installment_plans", "housing", "existing_credits", "job",
    "people_liable", "telephone", "foreign_worker",
]


def main(path):
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["case_id"] + CUES + ["decision"])
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 21:
                sys.exit(f"line {i}: expected 21 fields, got {len(fields)}")
            decision = {"1": "Good", "2": "Bad"}[fields[20]]
            writer.writerow([str(i)] + fields[:20] + [decision])


if __name__ == "__main__":
    main(sys.argv[1])
