#include "cemu/dataset_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "cemu/array.hpp"

namespace cemu {

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw IoError(where + ": cannot parse '" + s + "'");
    return v;
}

std::string column_name(int a, int c) { return "x" + std::to_string(a) + "_" + std::to_string(c); }

}  // namespace

void write_dataset_csv(const std::filesystem::path& path, const ChoiceDataset& data) {
    if (data.K < 2 || data.p < 1 || data.X.size() != data.y.size()) {
        throw ContractViolation("write_dataset_csv: malformed dataset");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "y";
    for (int a = 1; a < data.K; ++a)
        for (int c = 1; c <= data.p; ++c) out << ',' << column_name(a, c);
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < data.n(); ++i) {
        out << data.y[i] + 1;
        for (int a = 0; a + 1 < data.K; ++a)
            for (int c = 0; c < data.p; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", data.X[i](a, c));
                out << ',' << buf;
            }
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

ChoiceDataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
    const auto header = split(line);
    if (header.empty() || header[0] != "y") throw IoError(path.string() + ": first column must be y");
    // Infer K - 1 and p from the last column name, then require the exact layout.
    const std::size_t ncov = header.size() - 1;
    int alts = 0, p = 0;
    if (ncov > 0 && std::sscanf(header.back().c_str(), "x%d_%d", &alts, &p) != 2) {
        throw IoError(path.string() + ": unrecognized column '" + header.back() + "'");
    }
    if (alts < 1 || p < 1 || static_cast<std::size_t>(alts * p) != ncov) {
        throw IoError(path.string() + ": header does not describe a (K-1) x p covariate block");
    }
    for (int a = 1, col = 1; a <= alts; ++a)
        for (int c = 1; c <= p; ++c, ++col)
            if (header[static_cast<std::size_t>(col)] != column_name(a, c)) {
                throw IoError(path.string() + ": expected column " + column_name(a, c) + ", found " +
                              header[static_cast<std::size_t>(col)]);
            }
    ChoiceDataset data;
    data.K = alts + 1;
    data.p = p;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = split(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (cells.size() != header.size()) throw IoError(where + ": expected " + std::to_string(header.size()) + " fields");
        const double y = parse_double(cells[0], where);
        if (y != static_cast<int>(y) || y < 1 || y > data.K) throw IoError(where + ": choice must be in 1.." + std::to_string(data.K));
        data.y.push_back(static_cast<int>(y) - 1);
        Eigen::MatrixXd X(alts, p);
        for (int a = 0, col = 1; a < alts; ++a)
            for (int c = 0; c < p; ++c, ++col) X(a, c) = parse_double(cells[static_cast<std::size_t>(col)], where);
        data.X.push_back(std::move(X));
    }
    return data;
}

}  // namespace cemu
