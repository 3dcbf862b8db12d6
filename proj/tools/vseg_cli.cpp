// Placeholder during bring-up; the real CLI is added with the app module.
int main() { return 0; }
