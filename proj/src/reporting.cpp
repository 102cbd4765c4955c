#include "attnlab/reporting.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace attnlab {

using json = nlohmann::json;

std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    check_data(ec == std::errc(), "number formatting failed");
    return std::string(buf, p);
}

std::string fmt_double_fixed(double v, int precision) {
    char buf[64];
    auto [p, ec] =
        std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, precision);
    check_data(ec == std::errc(), "number formatting failed");
    return std::string(buf, p);
}

std::string fmt_int(int64_t v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    check_data(ec == std::errc(), "number formatting failed");
    return std::string(buf, p);
}

// ---- CSV ----------------------------------------------------------------------

namespace {

bool needs_quoting(const std::string& field) {
    return field.find_first_of(",\"\n\r") != std::string::npos;
}

std::string quote_field(const std::string& field) {
    if (!needs_quoting(field)) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

void encode_row(std::string& out, const std::vector<std::string>& row) {
    for (size_t i = 0; i < row.size(); ++i) {
        if (i) out += ',';
        out += quote_field(row[i]);
    }
    out += '\n';
}

// One CSV record, honoring quotes; advances `pos` past the trailing newline.
std::vector<std::string> parse_row(const std::string& text, size_t& pos) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    while (pos < text.size()) {
        const char c = text[pos];
        if (quoted) {
            if (c == '"') {
                if (pos + 1 < text.size() && text[pos + 1] == '"') {
                    cur += '"';
                    ++pos;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (c == '\n') {
            ++pos;
            break;
        } else if (c != '\r') {
            cur += c;
        }
        ++pos;
    }
    check_data(!quoted, "csv: unterminated quoted field");
    fields.push_back(std::move(cur));
    return fields;
}

}  // namespace

std::string csv_encode(const CsvTable& table) {
    check_data(!table.schema.empty(), "csv: table needs a schema name");
    std::string out = "# schema: " + table.schema + " v" + fmt_int(table.version) + "\n";
    encode_row(out, table.header);
    for (const auto& row : table.rows) {
        check_data(row.size() == table.header.size(),
                   "csv: row width " + fmt_int(static_cast<int64_t>(row.size())) +
                       " does not match header width " +
                       fmt_int(static_cast<int64_t>(table.header.size())));
        encode_row(out, row);
    }
    return out;
}

CsvTable csv_parse(const std::string& text) {
    CsvTable table;
    size_t pos = 0;
    // schema line
    while (pos < text.size() && (text[pos] == '\n' || text[pos] == '\r')) ++pos;
    check_data(text.compare(pos, 10, "# schema: ") == 0,
               "csv: missing '# schema: <name> v<version>' line");
    pos += 10;
    const size_t eol = text.find('\n', pos);
    check_data(eol != std::string::npos, "csv: truncated schema line");
    std::string schema_line = text.substr(pos, eol - pos);
    if (!schema_line.empty() && schema_line.back() == '\r') schema_line.pop_back();
    const size_t vat = schema_line.rfind(" v");
    check_data(vat != std::string::npos && vat > 0, "csv: schema line lacks a version");
    table.schema = schema_line.substr(0, vat);
    const std::string ver = schema_line.substr(vat + 2);
    auto [p, ec] = std::from_chars(ver.data(), ver.data() + ver.size(), table.version);
    check_data(ec == std::errc() && p == ver.data() + ver.size(),
               "csv: bad schema version '" + ver + "'");
    pos = eol + 1;

    check_data(pos < text.size(), "csv: missing header row");
    table.header = parse_row(text, pos);
    while (pos < text.size()) {
        if (text[pos] == '\n' || text[pos] == '\r') {  // tolerate trailing blank lines
            ++pos;
            continue;
        }
        auto row = parse_row(text, pos);
        check_data(row.size() == table.header.size(),
                   "csv: row width " + fmt_int(static_cast<int64_t>(row.size())) +
                       " does not match header width " +
                       fmt_int(static_cast<int64_t>(table.header.size())));
        table.rows.push_back(std::move(row));
    }
    return table;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    check_data(out.good(), "cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    check_data(out.good(), "write to '" + path + "' failed");
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check_data(in.good(), "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- record emitters ------------------------------------------------------------

std::string cost_json(const CostReport& r) {
    json j{{"schema", "cost v1"},
           {"config_id", r.config_id},
           {"total_macs", r.total_macs},
           {"total_params", r.total_params},
           {"elementwise", r.elementwise}};
    json layers = json::array();
    for (const auto& l : r.per_layer)
        layers.push_back(json{{"name", l.name}, {"macs", l.macs}, {"params", l.params}});
    j["per_layer"] = layers;
    if (r.measured) {
        j["ms_per_batch"] = r.ms_per_batch;
        j["ms_std"] = r.ms_std;
        j["batches_per_second"] = r.batches_per_second;
        j["batch_size"] = r.batch_size;
        j["warmup"] = r.warmup;
        j["iters"] = r.iters;
        j["machine"] = r.machine;
    }
    return j.dump(2) + "\n";
}

CsvTable cost_csv(const std::vector<CostReport>& reports) {
    CsvTable t;
    t.schema = "cost";
    t.header = {"config_id", "macs", "params", "batches_per_sec", "ms_per_batch", "machine"};
    for (const auto& r : reports)
        t.rows.push_back({r.config_id, fmt_int(r.total_macs), fmt_int(r.total_params),
                          r.measured ? fmt_double(r.batches_per_second) : "",
                          r.measured ? fmt_double(r.ms_per_batch) : "",
                          r.measured ? r.machine : ""});
    return t;
}

std::string retrieval_json(const std::string& config_id, const RetrievalResult& r) {
    json j{{"schema", "retrieval v1"},
           {"config_id", config_id},
           {"mAP", r.map},
           {"rank1", r.rank(1)},
           {"rank5", r.rank(5)},
           {"valid_queries", r.valid_queries}};
    return j.dump(2) + "\n";
}

CsvTable retrieval_csv(const std::string& config_id, const RetrievalResult& r) {
    CsvTable t;
    t.schema = "retrieval";
    t.header = {"config_id", "mAP", "rank1", "rank5"};
    t.rows.push_back(
        {config_id, fmt_double(r.map), fmt_double(r.rank(1)), fmt_double(r.rank(5))});
    return t;
}

CsvTable trainlog_csv(const TrainLog& log) {
    CsvTable t;
    t.schema = "trainlog";
    t.header = {"epoch", "loss", "lr"};
    for (const auto& e : log.epochs)
        t.rows.push_back({fmt_int(e.epoch), fmt_double(e.loss), fmt_double(e.lr)});
    return t;
}

std::string trainlog_json(const std::string& config_id, const TrainLog& log) {
    json j{{"schema", "trainlog v1"}, {"config_id", config_id}};
    j["epochs"] = json::array();
    for (const auto& e : log.epochs)
        j["epochs"].push_back(json{{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}});
    if (!log.epochs.empty()) j["final_loss"] = log.epochs.back().loss;
    return j.dump(2) + "\n";
}

// ---- scatter plot -----------------------------------------------------------------

namespace {

struct Ticks {
    double lo = 0, hi = 1, step = 0.25;
};

// Pleasant 1/2/5 ticks covering [mn, mx] after a little padding.
Ticks nice_ticks(double mn, double mx) {
    if (!(mx > mn)) {  // degenerate or empty: pad to a unit-ish window
        const double c = std::isfinite(mn) ? mn : 0.0;
        const double pad = std::max(std::fabs(c) * 0.1, 0.5);
        mn = c - pad;
        mx = c + pad;
    }
    const double span = mx - mn;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (mag * m >= raw) {
            step = mag * m;
            break;
        }
    }
    Ticks t;
    t.step = step;
    t.lo = std::floor(mn / step) * step;
    t.hi = std::ceil(mx / step) * step;
    if (t.hi <= t.lo) t.hi = t.lo + step;
    return t;
}

std::string xml_escape(const std::string& raw) {
    std::string out;
    for (char c : raw) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

}  // namespace

std::string render_scatter_svg(const std::vector<PlotPoint>& points,
                               const std::string& title) {
    constexpr int W = 800, H = 600;
    constexpr double ml = 80, mr = 30, mt = 50, mb = 60;  // margins
    const double pw = W - ml - mr, ph = H - mt - mb;

    double sx_min = 0, sx_max = 1, sy_min = 0, sy_max = 1;
    if (!points.empty()) {
        sx_min = sy_min = 1e300;
        sx_max = sy_max = -1e300;
        for (const auto& p : points) {
            sx_min = std::min(sx_min, p.speed);
            sx_max = std::max(sx_max, p.speed);
            sy_min = std::min(sy_min, p.map);
            sy_max = std::max(sy_max, p.map);
        }
    }
    const Ticks tx = nice_ticks(sx_min, sx_max);
    const Ticks ty = nice_ticks(sy_min, sy_max);

    auto px = [&](double v) {
        return ml + (v - tx.lo) / (tx.hi - tx.lo) * pw;
    };
    auto py = [&](double v) {
        return mt + ph - (v - ty.lo) / (ty.hi - ty.lo) * ph;
    };
    auto c2 = [](double v) { return fmt_double_fixed(v, 2); };

    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" "
         "viewBox=\"0 0 800 600\">\n";
    s += "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
    s += "<text x=\"400\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"18\">" + xml_escape(title) + "</text>\n";
    if (points.empty()) s += "<!-- no data -->\n";

    // frame
    s += "<rect x=\"" + c2(ml) + "\" y=\"" + c2(mt) + "\" width=\"" + c2(pw) +
         "\" height=\"" + c2(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";

    // ticks + grid
    for (double v = tx.lo; v <= tx.hi + tx.step * 0.5; v += tx.step) {
        const double x = px(v);
        s += "<line x1=\"" + c2(x) + "\" y1=\"" + c2(mt) + "\" x2=\"" + c2(x) + "\" y2=\"" +
             c2(mt + ph) + "\" stroke=\"#dddddd\"/>\n";
        s += "<text x=\"" + c2(x) + "\" y=\"" + c2(mt + ph + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
             fmt_double(v) + "</text>\n";
    }
    for (double v = ty.lo; v <= ty.hi + ty.step * 0.5; v += ty.step) {
        const double y = py(v);
        s += "<line x1=\"" + c2(ml) + "\" y1=\"" + c2(y) + "\" x2=\"" + c2(ml + pw) +
             "\" y2=\"" + c2(y) + "\" stroke=\"#dddddd\"/>\n";
        s += "<text x=\"" + c2(ml - 6) + "\" y=\"" + c2(y + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
             fmt_double(v) + "</text>\n";
    }

    // axis labels
    s += "<text x=\"" + c2(ml + pw / 2) + "\" y=\"" + c2(H - 14) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">batches per "
         "second</text>\n";
    s += "<text x=\"20\" y=\"" + c2(mt + ph / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" "
         "transform=\"rotate(-90 20 " + c2(mt + ph / 2) + ")\">mAP</text>\n";

    // points: trials as blue circles, anchors as red diamonds
    for (const auto& p : points) {
        const double x = px(p.speed), y = py(p.map);
        if (p.anchor) {
            s += "<path d=\"M " + c2(x) + " " + c2(y - 6) + " L " + c2(x + 6) + " " + c2(y) +
                 " L " + c2(x) + " " + c2(y + 6) + " L " + c2(x - 6) + " " + c2(y) +
                 " Z\" fill=\"#cc3333\"/>\n";
        } else {
            s += "<circle cx=\"" + c2(x) + "\" cy=\"" + c2(y) +
                 "\" r=\"4\" fill=\"#3366aa\"/>\n";
        }
        if (!p.label.empty())
            s += "<text x=\"" + c2(x + 7) + "\" y=\"" + c2(y - 7) +
                 "\" font-family=\"sans-serif\" font-size=\"10\">" + xml_escape(p.label) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

}  // namespace attnlab
