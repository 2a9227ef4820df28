#pragma once

// Attention-map export: per layer, the stack-top distributions alpha_i as a
// CSV matrix and an 8-bit PGM rendering, plus the argmax action sequence
// (PUSH/POP/NO-OP) per position for reading traces.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>
#include <vector>

#include "stackformer/model.hpp"

namespace stackformer {

template <typename T>
void write_alpha_csv(const std::string& path, const std::vector<std::vector<T>>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << std::setprecision(10);
    for (const auto& row : rows) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) out << ',';
            out << double(row[j]);
        }
        out << '\n';
    }
}

// Plain (ASCII) PGM, one pixel per alpha entry, value = round(255 * alpha).
template <typename T>
void write_alpha_pgm(const std::string& path, const std::vector<std::vector<T>>& rows) {
    if (rows.empty()) throw std::invalid_argument("write_alpha_pgm: no rows");
    const std::size_t w = rows[0].size(), h = rows.size();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "P2\n" << w << " " << h << "\n255\n";
    for (const auto& row : rows) {
        if (row.size() != w) throw std::invalid_argument("write_alpha_pgm: ragged rows");
        for (std::size_t j = 0; j < w; ++j) {
            if (j) out << ' ';
            long v = std::lround(255.0 * double(row[j]));
            out << std::min(255l, std::max(0l, v));
        }
        out << '\n';
    }
}

inline const char* action_name(std::size_t idx) {
    switch (idx) {
        case kActPush: return "PUSH";
        case kActPop: return "POP";
        case kActNoOp: return "NO-OP";
    }
    return "?";
}

// Runs the model on the token sequence and writes, per layer l:
//   <prefix>.layer<l>.alpha.csv / .pgm
// plus <prefix>.actions.txt listing argmax actions per layer and position.
template <typename T>
void dump_attention(const Model<T>& model, const std::vector<std::size_t>& ids,
                    const std::string& prefix) {
    if (!model.config().stack_enabled)
        throw std::invalid_argument("dump_attention: model has no stack sublayer");
    ForwardTrace<T> trace;
    model.forward(ids, &trace);
    for (std::size_t l = 0; l < trace.layer_alphas.size(); ++l) {
        const std::string base = prefix + ".layer" + std::to_string(l);
        write_alpha_csv(base + ".alpha.csv", trace.layer_alphas[l]);
        write_alpha_pgm(base + ".alpha.pgm", trace.layer_alphas[l]);
    }
    std::ofstream act(prefix + ".actions.txt");
    if (!act) throw std::runtime_error("cannot write " + prefix + ".actions.txt");
    for (std::size_t l = 0; l < trace.layer_actions.size(); ++l) {
        act << "layer " << l << ":";
        for (const auto& a : trace.layer_actions[l]) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < a.size(); ++k)
                if (a[k] > a[best]) best = k;
            act << ' ' << action_name(best);
        }
        act << '\n';
    }
}

}  // namespace stackformer
