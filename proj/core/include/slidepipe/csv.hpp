#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace slidepipe {

// Minimal CSV support for the pipeline's tabular exports. Fields are written
// verbatim (none of our columns contain commas or quotes); numeric fields are
// formatted by format_double so repeated runs emit byte-identical files.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void write(const std::filesystem::path& file) const;
    static CsvTable read(const std::filesystem::path& file);

    int column(const std::string& name) const; // -1 when absent
};

std::string format_double(double v);
std::string format_int(long long v);

} // namespace slidepipe
