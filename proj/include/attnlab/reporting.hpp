#pragma once

// Locale-free number formatting, schema-versioned CSV in/out, JSON records,
// and the hand-emitted accuracy-vs-speed SVG scatter. Everything here is
// byte-deterministic for fixed inputs.

#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/cost.hpp"
#include "attnlab/retrieval.hpp"
#include "attnlab/train.hpp"

namespace attnlab {

// Shortest text that round-trips the value exactly.
std::string fmt_double(double v);
// Fixed decimal places (used where layout stability matters, e.g. SVG).
std::string fmt_double_fixed(double v, int precision);
std::string fmt_int(int64_t v);

// ---- CSV -------------------------------------------------------------------

// First line is `# schema: <name> v<version>`, then a header row, then data.
// Fields are RFC-4180 quoted when they contain delimiters.
struct CsvTable {
    std::string schema;
    int version = 1;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::string csv_encode(const CsvTable& table);
CsvTable csv_parse(const std::string& text);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// ---- record emitters ---------------------------------------------------------

std::string cost_json(const CostReport& report);
CsvTable cost_csv(const std::vector<CostReport>& reports);

std::string retrieval_json(const std::string& config_id, const RetrievalResult& result);
CsvTable retrieval_csv(const std::string& config_id, const RetrievalResult& result);

CsvTable trainlog_csv(const TrainLog& log);
std::string trainlog_json(const std::string& config_id, const TrainLog& log);

// ---- scatter plot --------------------------------------------------------------

struct PlotPoint {
    double speed = 0;  // batches per second
    double map = 0;
    std::string label;
    bool anchor = false;
};

// Fixed 800x600 viewport, mAP against batches/second, anchors highlighted.
std::string render_scatter_svg(const std::vector<PlotPoint>& points,
                               const std::string& title);

}  // namespace attnlab
