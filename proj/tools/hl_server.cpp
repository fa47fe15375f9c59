#include <iostream>

#include "serve_options.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Highlighted-generation HTTP service"};
    hl::tools::ServeArgs args;
    hl::tools::add_serve_options(app, args);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e, std::cerr, std::cerr);
        return 2;
    }
    try {
        return hl::tools::run_serve(args);
    } catch (const hl::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
