#pragma once

#include <string>
#include <vector>

#include "nanotfm/eval.hpp"

namespace nanotfm {

// Numeric table with a header row. Cells must all parse as finite reals;
// anything else (including empty cells) is rejected with the offending
// row/column named — callers are expected to preprocess categorical features
// and missing values before handing files to this program.
struct CsvMatrix {
    std::vector<std::string> header;
    std::int64_t rows = 0, cols = 0;
    std::vector<float> values;  // rows x cols
};

CsvMatrix read_numeric_csv(const std::string& path);

// CSV with a header where the last column holds integer class labels.
eval::EvalTask read_task_csv(const std::string& path);

// Writes rows verbatim, comma-joined; include the header as the first row.
void write_csv(const std::string& path,
               const std::vector<std::vector<std::string>>& rows);

std::string fmt_double(double v);  // round-trippable "%.17g"
std::string fmt_metric(double v);  // compact "%.6f" for report values

}  // namespace nanotfm
