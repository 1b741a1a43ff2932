// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

// Text and SVG renderings of a switching strategy, one row per layer and one
// column per module role.

#include <array>
#include <cctype>
#include <cmath>
#include <charconv>
#include <sstream>
#include <string>

#include <fmt/format.h>

#include "msd/error.hpp"
#include "msd/strategy.hpp"

namespace msd {

namespace {

constexpr std::string_view kHeaderWord = "layer";

int digits(int v)
{
    int d = 1;
    while (v >= 10) {
        v /= 10;
        ++d;
    }
    return d;
}

std::string fill_for_model(int model)
{
    static constexpr std::array<std::string_view, 10> kPalette = {
        "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
        "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    if (model < static_cast<int>(kPalette.size())) {
        return std::string(kPalette[model]);
    }
    // golden-angle hue walk keeps later colors apart
    const double hue = std::fmod(model * 137.508, 360.0);
    return fmt::format("hsl({:.1f},60%,55%)", hue);
}

std::string render_text(const SwitchStrategy& s)
{
    const int cell_width = digits(s.num_models() - 1) + 1;
    const int layer_width = std::max(static_cast<int>(kHeaderWord.size()), digits(s.num_layers() - 1));
    std::string out = fmt::format("{:<{}}", kHeaderWord, layer_width);
    for (ModuleRole r : kAllRoles) {
        out += fmt::format("{:>{}}", role_symbol(r), cell_width);
    }
    out += '\n';
    for (int l = 0; l < s.num_layers(); ++l) {
        out += fmt::format("{:<{}}", l, layer_width);
        for (ModelIndex m : s.row(l)) {
            out += fmt::format("{:>{}}", m, cell_width);
        }
        out += '\n';
    }
    return out;
}

std::string render_svg(const SwitchStrategy& s)
{
    constexpr int kCell = 24;
    constexpr int kMarginLeft = 40;
    constexpr int kMarginTop = 24;
    const int width = kMarginLeft + kNumRoles * kCell + 8;
    const int height = kMarginTop + s.num_layers() * kCell + 8;
    std::string out = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
        "font-family=\"monospace\" font-size=\"12\">\n",
        width, height);
    for (int m = 0; m < kNumRoles; ++m) {
        out += fmt::format("  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                           kMarginLeft + m * kCell + kCell / 2, kMarginTop - 8, role_symbol(kAllRoles[m]));
    }
    for (int l = 0; l < s.num_layers(); ++l) {
        const int y = kMarginTop + l * kCell;
        out += fmt::format("  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", kMarginLeft - 6,
                           y + kCell / 2 + 4, l);
        for (int m = 0; m < kNumRoles; ++m) {
            const int model = s.row(l)[m];
            out += fmt::format(
                "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#ffffff\" "
                "data-layer=\"{}\" data-role=\"{}\" data-model=\"{}\"/>\n",
                kMarginLeft + m * kCell, y, kCell, kCell, fill_for_model(model), l, role_symbol(kAllRoles[m]),
                model);
        }
    }
    out += "</svg>\n";
    return out;
}

} // namespace

RenderFormat parse_render_format(std::string_view name)
{
    if (name == "text" || name == "text-grid") {
        return RenderFormat::kText;
    }
    if (name == "svg") {
        return RenderFormat::kSvg;
    }
    throw UsageError(fmt::format("unsupported render format '{}' (expected text or svg)", name));
}

std::string render_strategy(const SwitchStrategy& s, RenderFormat format)
{
    switch (format) {
    case RenderFormat::kText:
        return render_text(s);
    case RenderFormat::kSvg:
        return render_svg(s);
    }
    throw UsageError("unsupported render format");
}

SwitchStrategy parse_text_grid(std::string_view text, int num_models)
{
    std::vector<LayerRow> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        std::string first;
        if (!(fields >> first) || first == kHeaderWord) {
            continue;
        }
        int layer = -1;
        const auto [ptr, ec] = std::from_chars(first.data(), first.data() + first.size(), layer);
        if (ec != std::errc() || ptr != first.data() + first.size() || layer != static_cast<int>(rows.size())) {
            throw DataError(fmt::format("text grid line {}: expected layer index {}", line_no, rows.size()));
        }
        LayerRow row{};
        for (int m = 0; m < kNumRoles; ++m) {
            int v = -1;
            if (!(fields >> v) || v < 0 || v >= num_models) {
                throw DataError(fmt::format("text grid line {}: bad cell {}", line_no, m));
            }
            row[m] = static_cast<ModelIndex>(v);
        }
        std::string extra;
        if (fields >> extra) {
            throw DataError(fmt::format("text grid line {}: trailing content '{}'", line_no, extra));
        }
        rows.push_back(row);
    }
    if (rows.empty()) {
        throw DataError("text grid holds no layers");
    }
    return SwitchStrategy(num_models, std::move(rows));
}

} // namespace msd
