#include "pbc/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pbc {

std::string format_number(double v)
{
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string quote(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::string escape_xml(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

constexpr double kWidth = 640, kHeight = 400, kLeft = 60, kRight = 150, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

void frame(std::ostringstream& os, const std::string& title, const std::string& x_label, const std::string& y_label)
{
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape_xml(title)
       << "</text>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
       << kHeight - kBottom << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 10
       << "\" text-anchor=\"middle\">" << escape_xml(x_label) << "</text>\n";
    os << "<text x=\"15\" y=\"" << (kTop + kHeight - kBottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 15 "
       << (kTop + kHeight - kBottom) / 2 << ")\">" << escape_xml(y_label) << "</text>\n";
}

} // namespace

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

CsvTable& CsvTable::row(std::vector<std::string> cells)
{
    if (cells.size() != header_.size())
        throw std::invalid_argument("csv: row has " + std::to_string(cells.size()) + " cells, header has " +
                                    std::to_string(header_.size()));
    rows_.push_back(std::move(cells));
    return *this;
}

std::string CsvTable::str() const
{
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += quote(cells[i]);
        }
        out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<SvgSeries>& series)
{
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool any = false;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            if (!any) {
                x0 = x1 = x;
                y0 = std::min(0.0, y);
                y1 = std::max(1.0, y);
                any = true;
            }
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (x1 == x0) x1 = x0 + 1;
    auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); };
    auto py = [&](double y) { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); };

    std::ostringstream os;
    frame(os, title, x_label, y_label);
    for (int i = 0; i <= 4; ++i) {
        const double y = y0 + (y1 - y0) * i / 4;
        os << "<text x=\"" << kLeft - 5 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << format_number(std::round(y * 100) / 100)
           << "</text>\n";
        const double x = x0 + (x1 - x0) * i / 4;
        os << "<text x=\"" << px(x) << "\" y=\"" << kHeight - kBottom + 15 << "\" text-anchor=\"middle\">"
           << format_number(std::round(x * 100) / 100) << "</text>\n";
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (auto [x, y] : series[s].points) os << px(x) << ',' << py(y) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << kWidth - kRight + 10 << "\" y=\"" << kTop + 15 * s << "\" fill=\"" << color << "\">"
           << escape_xml(series[s].name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string svg_bar_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<std::string>& labels, const std::vector<double>& values)
{
    if (labels.size() != values.size()) throw std::invalid_argument("svg: label/value count mismatch");
    double top = 0.0;
    for (double v : values) top = std::max(top, v);
    if (top <= 0.0) top = 1.0;
    std::ostringstream os;
    frame(os, title, x_label, y_label);
    const double span = (kWidth - kLeft - kRight) / double(std::max<std::size_t>(1, values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double h = values[i] / top * (kHeight - kTop - kBottom);
        const double x = kLeft + span * double(i);
        os << "<rect x=\"" << x + 1 << "\" y=\"" << kHeight - kBottom - h << "\" width=\"" << span - 2
           << "\" height=\"" << h << "\" fill=\"" << kPalette[0] << "\"/>\n";
        if (values.size() <= 20 || i % 2 == 0)
            os << "<text x=\"" << x + span / 2 << "\" y=\"" << kHeight - kBottom + 15
               << "\" text-anchor=\"middle\" font-size=\"9\">" << escape_xml(labels[i]) << "</text>\n";
    }
    os << "<text x=\"" << kLeft - 5 << "\" y=\"" << kTop + 4 << "\" text-anchor=\"end\">" << format_number(top)
       << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace pbc
