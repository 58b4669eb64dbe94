#pragma once

#include <cstddef>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace pbc {

// Shortest round-trip decimal form.
std::string format_number(double v);

// Comma-separated, LF-terminated, header first.
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header);

    template <class... Cells>
    CsvTable& add(const Cells&... cells)
    {
        return row({cell(cells)...});
    }
    CsvTable& row(std::vector<std::string> cells);

    std::size_t rows() const noexcept { return rows_.size(); }
    std::string str() const;

    static std::string cell(const std::string& s) { return s; }
    static std::string cell(const char* s) { return s; }
    static std::string cell(double v) { return format_number(v); }
    static std::string cell(bool v) { return v ? "1" : "0"; }
    template <class I>
        requires std::is_integral_v<I>
    static std::string cell(I v)
    {
        return std::to_string(v);
    }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

struct SvgSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<SvgSeries>& series);
std::string svg_bar_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<std::string>& labels, const std::vector<double>& values);

} // namespace pbc
