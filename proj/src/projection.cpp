#include "echoprompt/projection.hpp"

#include "echoprompt/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace echoprompt {

std::vector<EmbeddingRow> embedding_rows(const EchoPromptModel& model, std::span<const VideoSample> samples)
{
    const PromptPool& pool = model.pool();
    const std::size_t d = pool.embed_dim();
    const auto& views = model.config().view_names;
    std::vector<EmbeddingRow> rows;
    const Tensor& keys = pool.keys().value();
    for (std::size_t m = 0; m < pool.size(); ++m) {
        EmbeddingRow r{"key", "key" + std::to_string(m), views[pool.group_of_key(m)], {}};
        r.values.assign(keys.values().begin() + static_cast<std::ptrdiff_t>(m * d),
                        keys.values().begin() + static_cast<std::ptrdiff_t>((m + 1) * d));
        rows.push_back(std::move(r));
    }
    for (const VideoSample& s : samples) {
        if (s.view_id >= views.size()) {
            throw InvalidArgument("embedding_rows: sample view out of range");
        }
        rows.push_back({"query", s.sample_id, views[s.view_id], model.query(s).vector});
    }
    return rows;
}

namespace {

void check_field(const std::string& s, const char* what)
{
    if (s.find_first_of(",\n\r\"") != std::string::npos) {
        throw InvalidArgument(std::string("embeddings csv: ") + what + " '" + s + "' contains a separator");
    }
}

std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        default: out += c;
        }
    }
    return out;
}

std::vector<std::string> split_line(std::string_view line)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.emplace_back(line.substr(start, comma - start));
        if (comma == std::string_view::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

} // namespace

std::string embeddings_to_csv(std::span<const EmbeddingRow> rows)
{
    const std::size_t d = rows.empty() ? 0 : rows.front().values.size();
    std::string out = "type,label,group";
    for (std::size_t k = 0; k < d; ++k) {
        out += ",d" + std::to_string(k);
    }
    out += '\n';
    char buf[32];
    for (const EmbeddingRow& r : rows) {
        if (r.values.size() != d) {
            throw InvalidArgument("embeddings csv: rows differ in dimension");
        }
        check_field(r.type, "type");
        check_field(r.label, "label");
        check_field(r.group, "group");
        out += r.type + ',' + r.label + ',' + r.group;
        for (double v : r.values) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out += ',';
            out += buf;
        }
        out += '\n';
    }
    return out;
}

std::vector<EmbeddingRow> embeddings_from_csv(std::string_view text)
{
    std::vector<EmbeddingRow> rows;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    std::size_t dim = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto fields = split_line(line);
        if (line_no == 1) {
            if (fields.size() < 4 || fields[0] != "type" || fields[1] != "label" || fields[2] != "group") {
                throw ParseError("csv_header", "expected 'type,label,group,d0,...'");
            }
            dim = fields.size() - 3;
            continue;
        }
        if (fields.size() != dim + 3) {
            throw ParseError("csv_row", "line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                                            " fields, expected " + std::to_string(dim + 3));
        }
        EmbeddingRow r{fields[0], fields[1], fields[2], std::vector<double>(dim)};
        for (std::size_t k = 0; k < dim; ++k) {
            const std::string& f = fields[k + 3];
            const auto res = std::from_chars(f.data(), f.data() + f.size(), r.values[k]);
            if (res.ec != std::errc{} || res.ptr != f.data() + f.size()) {
                throw ParseError("csv_row", "line " + std::to_string(line_no) + ": bad number '" + f + "'");
            }
        }
        rows.push_back(std::move(r));
    }
    if (line_no == 0) {
        throw ParseError("csv_header", "empty file");
    }
    return rows;
}

Projection2D pca2(std::span<const EmbeddingRow> rows)
{
    if (rows.size() < 3) {
        throw InvalidArgument("pca: need at least 3 rows to plot, got " + std::to_string(rows.size()));
    }
    const std::size_t n = rows.size();
    const std::size_t d = rows.front().values.size();
    if (d < 2) {
        throw InvalidArgument("pca: need at least 2 dimensions");
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        if (rows[i].values.size() != d) {
            throw InvalidArgument("pca: rows differ in dimension");
        }
        for (std::size_t k = 0; k < d; ++k) {
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i].values[k];
        }
    }
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) {
        throw NumericError("pca: eigendecomposition failed");
    }

    Projection2D p;
    p.mean.assign(mean.data(), mean.data() + d);
    for (int c = 0; c < 2; ++c) {
        // Eigenvalues are ascending.
        const Eigen::Index col = static_cast<Eigen::Index>(d) - 1 - c;
        Eigen::VectorXd v = eig.eigenvectors().col(col);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) {
            v = -v;
        }
        p.components[c].assign(v.data(), v.data() + d);
        p.variances[c] = eig.eigenvalues()(col);
    }
    p.coords.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 2; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                s += x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) * p.components[c][k];
            }
            p.coords[i][c] = s;
        }
    }
    return p;
}

std::string render_svg(std::span<const EmbeddingRow> rows, const Projection2D& projection)
{
    if (rows.size() != projection.coords.size()) {
        throw InvalidArgument("render_svg: row and coordinate counts differ");
    }
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::vector<std::string> groups;
    for (const EmbeddingRow& r : rows) {
        if (std::find(groups.begin(), groups.end(), r.group) == groups.end()) {
            groups.push_back(r.group);
        }
    }
    double lo[2] = {projection.coords[0][0], projection.coords[0][1]};
    double hi[2] = {lo[0], lo[1]};
    for (const auto& c : projection.coords) {
        for (int k = 0; k < 2; ++k) {
            lo[k] = std::min(lo[k], c[k]);
            hi[k] = std::max(hi[k], c[k]);
        }
    }
    const double width = 640, height = 480, margin = 40;
    auto sx = [&](double v) {
        const double span = hi[0] - lo[0];
        return span > 0 ? margin + (v - lo[0]) / span * (width - 2 * margin - 120) : width / 2;
    };
    auto sy = [&](double v) {
        const double span = hi[1] - lo[1];
        return span > 0 ? height - margin - (v - lo[1]) / span * (height - 2 * margin) : height / 2;
    };

    std::ostringstream svg;
    char buf[256];
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n";
    svg << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">PC1 (var %.4g) vs PC2 (var "
                  "%.4g)</text>\n",
                  static_cast<int>(margin), projection.variances[0], projection.variances[1]);
    svg << buf;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t g = static_cast<std::size_t>(
            std::find(groups.begin(), groups.end(), rows[i].group) - groups.begin());
        const char* color = palette[g % std::size(palette)];
        const double x = sx(projection.coords[i][0]);
        const double y = sy(projection.coords[i][1]);
        if (rows[i].type == "key") {
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%.2f\" y=\"%.2f\" width=\"10\" height=\"10\" fill=\"%s\" stroke=\"black\"/>\n",
                          x - 5, y - 5, color);
        } else {
            std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3.5\" fill=\"%s\" opacity=\"0.7\"/>\n",
                          x, y, color);
        }
        svg << buf;
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double y = margin + 20.0 * static_cast<double>(g);
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"5\" fill=\"%s\"/>\n", width - 120, y,
                      palette[g % std::size(palette)]);
        svg << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"12\">", width - 108, y + 4);
        svg << buf << xml_escape(groups[g]) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

} // namespace echoprompt
